"""Multi-task transition-based dependency parser on a small numpy autodiff."""

from .evaluation import ScoreReport, evaluate, parse_greedy, score
from .model import ModelConfig, ParserModel
from .multitask import ParameterPartition, SharingStrategy, build_partition
from .training import TrainConfig, pretrain_finetune, sample_task, train
from .transition import Action, ActionInventory, static_oracle
from .treebank_io import Sentence, TaskSpec, Token, Treebank, read_conll, read_conll_file, write_conll

__version__ = "0.1.0"
