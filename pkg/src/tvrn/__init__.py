"""Compression-aware temporal video rescaling on a small numpy autodiff engine."""

from .codec import CodecMetadata, CodedClip, encode, qstep
from .errors import TvrnError
from .metrics import RdPoint, bd_rate, psnr, ssim
from .pipeline import TrainConfig, TvrnModel, alternate_train, basic_loss, rd_sweep
from .surrogate import Surrogate, train_surrogate
from .tensor import Tape, Tensor
from .video import SyntheticSpec, VideoClip, generate_synthetic, load_clip, make_corpus, save_clip

__version__ = "0.1.0"
