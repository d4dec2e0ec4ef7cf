from .check import finite_difference_check
from .params import ParamStore, dump_checkpoint, load_checkpoint, parse_checkpoint, save_checkpoint
from .tape import PRIMITIVES, Node, Tape, backward, eval_graph

__all__ = [
    "PRIMITIVES",
    "Node",
    "ParamStore",
    "Tape",
    "backward",
    "dump_checkpoint",
    "eval_graph",
    "finite_difference_check",
    "load_checkpoint",
    "parse_checkpoint",
    "save_checkpoint",
]
