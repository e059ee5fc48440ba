"""Linear-attention graph transformer with cross-layer gated fusion, on a small numpy autodiff core."""

from .graphstore import Graph, build_csr, generate_er, partition_bfs, plant_task, read_container, write_container
from .model import Model, ModelConfig, build, load_checkpoint, readout, save_checkpoint
from .trainkit import RunReport, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Graph", "build_csr", "generate_er", "partition_bfs", "plant_task", "read_container", "write_container",
    "Model", "ModelConfig", "build", "load_checkpoint", "readout", "save_checkpoint",
    "RunReport", "TrainConfig", "train",
]
