"""Command-line front door: ``tvrn <command> [options]``."""

from __future__ import annotations

import argparse
import contextlib
import sys
from pathlib import Path

import numpy as np

from . import codec, metrics
from . import tensor as T
from .enhancement import (CompressionEncoder, Enhancer, RankingModel, build_enhancer_pairs,
                          build_rank_dataset, train_enhancer, train_ranker)
from .errors import FormatError, InvalidDatasetError, TvrnError
from .experiments import freq_analysis, grad_bound_experiment, grad_noise_experiment, rd_table
from .pipeline import TrainConfig, TvrnModel, alternate_train, rd_sweep, warm_start, write_curves
from .surrogate import TRAIN_QPS, Surrogate, build_samples, train_surrogate
from .tensor import Tensor
from .video import PATTERNS, SyntheticSpec, VideoClip, generate_synthetic, load_clip, make_corpus, save_clip


def _velocity(text: str) -> tuple[float, float]:
    parts = text.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"velocity must be dx,dy, got {text!r}")
    return float(parts[0]), float(parts[1])


def _qp_list(text: str) -> tuple[int, ...]:
    """``17,22,27`` or ``17-27``."""
    try:
        if "-" in text and "," not in text:
            lo, hi = (int(v) for v in text.split("-"))
            return tuple(range(lo, hi + 1))
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad qp list {text!r}") from None


def _float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad number list {text!r}") from None


def _load_dir(path) -> list[VideoClip]:
    files = sorted(Path(path).glob("*.tvc"))
    if not files:
        raise InvalidDatasetError(f"no .tvc clips in {path}")
    return [load_clip(f) for f in files]


def _split(clips, held_out: float = 0.25):
    n = max(1, int(round(len(clips) * held_out)))
    if len(clips) < 2:
        return clips, clips
    return clips[:-n], clips[-n:]


def _save_clip_any(data: np.ndarray, path: str) -> None:
    if path.endswith(".tvt"):
        T.save_tensors(path, [data])
    else:
        save_clip(VideoClip(data), path)


def _load_clip_any(path: str) -> np.ndarray:
    if path.endswith(".tvt"):
        return T.load_tensors(path)[0]
    return load_clip(path).data


def _print_rows(rows) -> None:
    for r in rows:
        print(", ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in r.items()))


def _model(args, rng) -> TvrnModel:
    model = TvrnModel(rng)
    if getattr(args, "model", None):
        model.load(args.model)
    return model


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(args, rng):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.pattern is None and args.velocity is None:
        clips = make_corpus(args.count, args.seed, frames=args.frames, size=args.size)
    else:
        # a fixed pattern and/or velocity; unset fields still vary per clip
        clips = []
        for i in range(args.count):
            pattern = args.pattern or PATTERNS[i % len(PATTERNS)]
            if args.velocity is None:
                speed, angle = rng.uniform(0.0, 2.0), rng.uniform(0, 2 * np.pi)
                velocity = (speed * np.cos(angle), speed * np.sin(angle))
            else:
                velocity = args.velocity
            spec = SyntheticSpec(pattern=pattern, velocity=velocity, frames=args.frames, height=args.size,
                                 width=args.size, noise=0.01, seed=int(rng.integers(2**31)))
            clips.append(generate_synthetic(spec)[0])
    for i, c in enumerate(clips):
        save_clip(c, out / f"clip_{i:04d}.tvc")
    print(f"wrote {len(clips)} clips to {out}")


def cmd_codec(args, rng):
    clip = load_clip(args.input)
    coded = codec.encode(clip, args.qp)
    save_clip(coded.reconstruction, args.out)
    if args.meta:
        codec.save_metadata(coded.metadata, args.meta)
    bpp = codec.bpp(coded.metadata, clip.frame_count, clip.height, clip.width)
    print(f"qp={args.qp} bits={coded.metadata.bits} bpp={bpp:.4f} "
          f"psnr={metrics.psnr(coded.reconstruction, clip):.3f}")


def cmd_train_surrogate(args, rng):
    clips = _load_dir(args.data)
    train, val = _split(clips)
    model = Surrogate(rng, conditioned=not args.unconditioned)
    report = train_surrogate(model, build_samples(train, args.qps), args.steps, rng, batch=args.batch,
                             lr=args.lr, val_samples=build_samples(val, args.qps))
    model.save(args.out)
    rows = report.rows()
    if args.csv:
        metrics.write_csv(args.csv, rows, ("qp", "simulation_psnr", "copy_psnr"))
    _print_rows(rows)


def cmd_train_ranker(args, rng):
    clips = _load_dir(args.data)
    train, val = _split(clips)
    model = RankingModel(rng)
    report = train_ranker(model, build_rank_dataset(train, args.qps), args.steps, rng,
                          batch=args.batch, lr=args.lr, val=build_rank_dataset(val, args.qps))
    model.save(args.out)
    print(f"pairwise accuracy {report.accuracy:.4f} (untrained {report.initial_accuracy:.4f})")


def _encoder(args, rng) -> CompressionEncoder:
    ranker = RankingModel(rng)
    if args.ranker:
        ranker.load(args.ranker)
    return ranker.encoder


def cmd_train_enhancer(args, rng):
    clips = _load_dir(args.data)
    train, val = _split(clips)
    model = Enhancer(rng, _encoder(args, rng))
    report = train_enhancer(model, build_enhancer_pairs(train, args.qps), args.steps, rng,
                            batch=args.batch, lr=args.lr, val_pairs=build_enhancer_pairs(val, args.qps))
    model.save(args.out)
    _print_rows([{"qp": q, "enhanced_psnr": report.enhanced_psnr[q], "input_psnr": report.input_psnr[q]}
                 for q in report.qps])


def cmd_train(args, rng):
    clips = _load_dir(args.data)
    train, val = _split(clips)
    model = TvrnModel(rng)
    if args.ranker:
        ranker = RankingModel(rng)
        ranker.load(args.ranker)
        model.encoder.load_state(ranker.encoder.state())
    if args.surrogate:
        model.surrogate.load(args.surrogate)
    for name in ("enh1", "enh2"):
        if args.enhancer:
            getattr(model, name).load(args.enhancer)
    if args.warm_steps:
        warm_start(model, train, args.warm_steps, rng, batch=args.batch)
    cfg = TrainConfig(steps=args.steps, batch=args.batch, lam=args.lam, lr=args.lr,
                      surrogate_lr=args.surrogate_lr, qp_range=(min(args.qps), max(args.qps)),
                      guidance=args.guidance, noise_alpha=args.noise_alpha, seed=args.seed,
                      val_every=args.val_every)
    log = (lambda r: print(f"step {r['step']}: L_basic {r['L_basic']:.5f} "
                           f"L_surrogate {r['L_surrogate']:.5f}")) if args.verbose else None
    result = alternate_train(model, train, cfg, val_clips=val, log=log)
    model.save(args.out)
    if args.curves:
        write_curves(args.curves, result.curves)
    last = result.curves[-1] if result.curves else None
    if last:
        print(f"final L_basic {last['L_basic']:.5f} L_surrogate {last['L_surrogate']:.5f}")


def cmd_rescale(args, rng):
    model = _model(args, rng)
    if args.mode == "down":
        x = Tensor(_load_clip_any(args.input)[None])
        y, z = model.downscale(x)
        if args.bypass_codec:
            T.save_tensors(args.out, [y.data[0], z.data[0]])
            print(f"wrote y {y.shape[1:]} and z {z.shape[1:]} to {args.out}")
            return
        coded = codec.encode(VideoClip(y.data[0]), args.qp)
        save_clip(coded.reconstruction, args.out)
        if args.meta:
            codec.save_metadata(coded.metadata, args.meta)
        print(f"qp={args.qp} bits={coded.metadata.bits}")
        return
    if args.bypass_codec:
        arrays = T.load_tensors(args.input)
        if len(arrays) != 2:
            raise FormatError(f"{args.input}: expected the y and z tensors written by --mode down")
        x_hat = model.upscale(Tensor(arrays[0][None]), Tensor(arrays[1][None]), enhance=False)
    else:
        x_hat = model.upscale(Tensor(_load_clip_any(args.input)[None]))
    _save_clip_any(x_hat.data[0], args.out)
    print(f"wrote {x_hat.shape[1]} frames to {args.out}")


def cmd_eval(args, rng):
    recon = _load_clip_any(args.recon)
    ref = _load_clip_any(args.ref)
    row = metrics.evaluate(recon, ref)
    if args.csv:
        metrics.write_csv(args.csv, [{"sequence": Path(args.recon).stem, **row}])
    _print_rows([row])


def cmd_rd_sweep(args, rng):
    clips = _load_dir(args.data)
    model = _model(args, rng) if args.model else None
    result = rd_sweep(model, clips, args.qps)
    metrics.write_csv(args.out, result.rows, ("method", "qp", "clip", "bpp", "psnr", "ssim"))
    for m, curve in result.curves.items():
        for qp, p in zip(args.qps, curve):
            print(f"{m} qp={qp} bpp={p.bpp:.4f} psnr={p.psnr:.3f}")
    for m, v in result.bd_rates.items():
        print(f"BD-rate tvrn vs {m}: {v:.2f}%")


def cmd_grad_bound(args, rng):
    clips = _load_dir(args.data)
    sur = None
    if not args.oracle:
        sur = Surrogate(rng)
        if args.surrogate:
            sur.load(args.surrogate)
    report = grad_bound_experiment(sur, [VideoClip(c.data[:args.frames]) for c in clips], args.qp,
                                   args.eps, args.k, args.seed)
    metrics.write_csv(args.out, report.rows(), ("d_hat", "delta_g"))
    env = report.envelope
    print(f"envelope {env.slope:.4f} * D + {env.intercept:.4f}, coverage {env.coverage:.3f}, "
          f"median delta_g {report.median_delta_g:.5f}")


def cmd_grad_noise(args, rng):
    clips = _load_dir(args.data)
    train, test = _split(clips)
    state = TvrnModel(np.random.default_rng(args.seed))
    if args.model:
        state.load(args.model)
    snapshot = state.state()

    def make_model():
        m = TvrnModel(np.random.default_rng(args.seed))
        m.load_state(snapshot)
        return m

    cfg = TrainConfig(steps=args.steps, batch=args.batch, seed=args.seed, lr=args.lr)
    runs = grad_noise_experiment(args.alphas, make_model, train, test, cfg)
    rows = rd_table(runs)
    metrics.write_csv(args.out, rows, ("alpha", "bd_vs_baseline", "bd_vs_alpha0", "mean_psnr", "noise_ratio"))
    _print_rows(rows)


def cmd_freq_analysis(args, rng):
    clips = _load_dir(args.data)
    model = _model(args, rng)
    rows = []
    for qp in args.qps:
        for m, res in freq_analysis(model, clips, qp).items():
            rows.append({"qp": qp, "method": m, "overlap": res.overlap})
    metrics.write_csv(args.out, rows, ("qp", "method", "overlap"))
    _print_rows(rows)


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tvrn", description="Compression-aware temporal video rescaling.")
    p.add_argument("--seed", type=int, default=0, help="global random seed")
    p.add_argument("--threads", type=int, default=None, help="BLAS thread limit")
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded BLAS so repeated runs are bit-identical")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="write a synthetic corpus of .tvc clips")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=32)
    s.add_argument("--frames", type=int, default=7)
    s.add_argument("--size", type=int, default=32)
    s.add_argument("--pattern", choices=PATTERNS)
    s.add_argument("--velocity", type=_velocity, help="dx,dy in pixels per frame")
    s.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="same as the global --seed")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("codec", help="run the toy codec on one clip")
    s.add_argument("--input", "--in", dest="input", required=True)
    s.add_argument("--qp", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--meta")
    s.set_defaults(func=cmd_codec)

    s = sub.add_parser("train-surrogate", help="fit the differentiable codec surrogate")
    s.add_argument("--data", required=True)
    s.add_argument("--steps", type=int, default=2000)
    s.add_argument("--qps", type=_qp_list, default=TRAIN_QPS)
    s.add_argument("--batch", type=int, default=4)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--unconditioned", action="store_true", help="ablate QP conditioning")
    s.add_argument("--out", required=True)
    s.add_argument("--csv")
    s.set_defaults(func=cmd_train_surrogate)

    s = sub.add_parser("train-ranker", help="pre-train the compression encoder and ranker")
    s.add_argument("--data", required=True)
    s.add_argument("--steps", type=int, default=1000)
    s.add_argument("--qps", type=_qp_list, default=TRAIN_QPS)
    s.add_argument("--batch", type=int, default=16)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_ranker)

    s = sub.add_parser("train-enhancer", help="pre-train one enhancer on coded clips")
    s.add_argument("--data", required=True)
    s.add_argument("--steps", type=int, default=500)
    s.add_argument("--qps", type=_qp_list, default=TRAIN_QPS)
    s.add_argument("--batch", type=int, default=4)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--ranker")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_enhancer)

    s = sub.add_parser("train", help="alternate training of the full model")
    s.add_argument("--data", required=True)
    s.add_argument("--steps", type=int, default=2000)
    s.add_argument("--lambda", dest="lam", type=float, default=10.0)
    s.add_argument("--qps", type=_qp_list, default=(17, 27))
    s.add_argument("--batch", type=int, default=4)
    s.add_argument("--lr", type=float, default=1e-4)
    s.add_argument("--surrogate-lr", type=float, default=1e-4)
    s.add_argument("--guidance", choices=("l1", "l2"), default="l1")
    s.add_argument("--noise-alpha", type=float, default=0.0)
    s.add_argument("--val-every", type=int, default=0)
    s.add_argument("--warm-steps", type=int, default=0,
                   help="upscaler-only steps through the real codec before alternate training")
    s.add_argument("--surrogate")
    s.add_argument("--ranker")
    s.add_argument("--enhancer")
    s.add_argument("--curves")
    s.add_argument("--verbose", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("rescale", help="downscale (+code) or upscale one clip")
    s.add_argument("--mode", choices=("down", "up"), required=True)
    s.add_argument("--model")
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--qp", type=int, default=22)
    s.add_argument("--meta")
    s.add_argument("--bypass-codec", action="store_true",
                   help="skip the codec; down writes y and z to a .tvt file, up reads them")
    s.set_defaults(func=cmd_rescale)

    s = sub.add_parser("eval", help="quality metrics of a reconstruction")
    s.add_argument("--recon", required=True)
    s.add_argument("--ref", required=True)
    s.add_argument("--csv")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("rd-sweep", help="RD curves and BD-rates against frame-skip baselines")
    s.add_argument("--data", required=True)
    s.add_argument("--model")
    s.add_argument("--qps", type=_qp_list, default=(22, 27, 32, 37))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_rd_sweep)

    s = sub.add_parser("grad-bound", help="gradient-error envelope of the surrogate")
    s.add_argument("--data", required=True)
    s.add_argument("--surrogate")
    s.add_argument("--oracle", action="store_true", help="codec-vs-codec self test")
    s.add_argument("--qp", type=int, default=32)
    s.add_argument("--eps", type=float, default=1e-2)
    s.add_argument("--k", type=int, default=8)
    s.add_argument("--frames", type=int, default=4)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_grad_bound)

    s = sub.add_parser("grad-noise", help="retrain with noisy surrogate gradients")
    s.add_argument("--data", required=True)
    s.add_argument("--model", help="initial state shared by every run")
    s.add_argument("--alphas", type=_float_list, default=(0.0, 0.4))
    s.add_argument("--steps", type=int, default=200)
    s.add_argument("--batch", type=int, default=4)
    s.add_argument("--lr", type=float, default=1e-4)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_grad_noise)

    s = sub.add_parser("freq-analysis", help="spectral overlap of coded LFR residuals")
    s.add_argument("--data", required=True)
    s.add_argument("--model")
    s.add_argument("--qps", type=_qp_list, default=(22, 37))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_freq_analysis)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    threads = 1 if args.deterministic else args.threads
    if threads is not None:
        from threadpoolctl import threadpool_limits
        limiter = threadpool_limits(limits=threads)
    else:
        limiter = contextlib.nullcontext()
    rng = np.random.default_rng(args.seed)
    try:
        with limiter:
            args.func(args, rng)
    except (TvrnError, OSError) as exc:
        print(f"tvrn {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
