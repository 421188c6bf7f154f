"""Audio-visual leader-follower attentive fusion for continuous affect regression."""
from affuse.metrics import ccc, ccc_loss, pearson
from affuse.model import FusionConfig, ModelBundle, load_checkpoint, save_checkpoint
from affuse.tensor import Tensor, backward, no_grad

__all__ = [
    "FusionConfig",
    "ModelBundle",
    "Tensor",
    "backward",
    "ccc",
    "ccc_loss",
    "load_checkpoint",
    "no_grad",
    "pearson",
    "save_checkpoint",
]
__version__ = "0.1.0"
