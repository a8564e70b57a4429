"""Rain-embedding-consistency deraining networks on a small numpy autodiff engine."""

from .models import EcNet, NetworkConfig, RainAutoencoder, derain, init_decoder_from_ae
from .rlcn import RlcnParams, compute_rlcn
from .trainer import TrainConfig, Trainer, train_autoencoder, train_ecnet

__version__ = "0.1.0"

__all__ = [
    "EcNet", "NetworkConfig", "RainAutoencoder", "derain", "init_decoder_from_ae",
    "RlcnParams", "compute_rlcn", "TrainConfig", "Trainer", "train_autoencoder", "train_ecnet",
]
