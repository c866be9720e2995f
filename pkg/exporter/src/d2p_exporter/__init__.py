"""One-shot conversion of public checkpoints and corpora into the d2p format."""

from .convert import export_model
from .corpus import export_corpus
from .interchange import write_corpus, write_model_dir

__version__ = "0.1.0"
