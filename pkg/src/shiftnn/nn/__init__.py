from .layers import BatchNorm2D, Conv2D, Dense, Flatten, LeakyReLU, MaxPool2D
from .losses import cross_entropy
from .network import LayerSpec, Network, NetworkConfig, SkipSpec, build_network
from .optim import AdamState, adam_step
from .presets import PRESETS, get_preset

__all__ = [
    "AdamState",
    "BatchNorm2D",
    "Conv2D",
    "Dense",
    "Flatten",
    "LayerSpec",
    "LeakyReLU",
    "MaxPool2D",
    "Network",
    "NetworkConfig",
    "PRESETS",
    "SkipSpec",
    "adam_step",
    "build_network",
    "cross_entropy",
    "get_preset",
]
