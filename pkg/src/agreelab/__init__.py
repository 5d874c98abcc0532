"""Desk-scale multilingual translation lab: shared-vocabulary transformer,
switched back-translation, and bidirectional KL agreement fine-tuning."""

from .agreement import AgreementConfig, LossBreakdown, kl_agreement, label_smoothed_nll, loss_total
from .evaluation import bleu, d_bleu
from .model import ModelConfig, Transformer
from .numerics import Tensor, backward, finite_diff_grad, log_softmax
from .sbt import DecodeConfig, make_bt, make_sbt, translate
from .tokenizer import Vocabulary, train_subwords
from .training import TrainConfig, adam_step, finetune, lr_at
from .experiment import BenchmarkConfig, ablation_verdict, run_seed

__version__ = "0.1.0"
