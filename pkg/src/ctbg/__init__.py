"""Graph-generation framework for contextual text block detection.

Text units (word or line boxes) are nodes; directed reading-order edges
chain them into blocks.  The package provides the autodiff core, the
relation transformer model, a synthetic scene generator, training, and
the LA/LC/GA evaluation suite.
"""

__version__ = "0.1.0"

from .graph import Block, Box, Edge, assemble_blocks
from .metrics import ScenePrediction, evaluate
from .model import ModelConfig, RelationTransformer
from .synth import DifficultyConfig, Scene, generate_corpus, generate_scene
from .train import TrainConfig, load_model, train

__all__ = [
    "Block",
    "Box",
    "DifficultyConfig",
    "Edge",
    "ModelConfig",
    "RelationTransformer",
    "Scene",
    "ScenePrediction",
    "TrainConfig",
    "assemble_blocks",
    "evaluate",
    "generate_corpus",
    "generate_scene",
    "load_model",
    "train",
    "__version__",
]
