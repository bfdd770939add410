"""HyperDAS at desk scale: a numpy autodiff engine, a tiny target transformer,
a synthetic entity/attribute dataset and a hypernetwork that locates and
patches attribute subspaces in the target's residual stream."""

__version__ = "0.1.0"

from hyperdas.model import HyperDAS, ModelConfig  # noqa: E402
from hyperdas.pipeline import WorldConfig, build_world, pretrained_target  # noqa: E402
from hyperdas.train import TrainConfig, train  # noqa: E402

__all__ = ["HyperDAS", "ModelConfig", "TrainConfig", "WorldConfig", "build_world",
           "pretrained_target", "train", "__version__"]
