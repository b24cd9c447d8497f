"""Transferable PEFT on a toy transformer: masking and dropping FFN knowledge while fine-tuning
so that a PEFT module trained on one base-model version keeps working on the next."""

__version__ = "0.1.0"

from .autograd import Tensor, backward, grad_check  # noqa: E402,F401
from .model import ModelConfig, TransformerModel, load_checkpoint, save_checkpoint  # noqa: E402,F401
from .peft import PeftConfig, PeftState, attach, detach, init_peft, transfer  # noqa: E402,F401
from .strategies import StrategySampler, TransPeftConfig, perturbation_stats  # noqa: E402,F401
from .tasks import TaskSpec, corpus_mixture, generate  # noqa: E402,F401
from .training import (OptimizerConfig, continual_update, evaluate_task, finetune_peft,  # noqa: E402,F401
                       pretrain, run_protocol)
