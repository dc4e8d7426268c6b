"""Every training and fine-tuning procedure, each returning a read-only ``SourceModel``."""
from .common import METHODS, SourceModel, TrainConfig, config_hash, derived_rng, publish
from .contrastive import train_contrastive
from .losses import distill_loss, pair_labels, simclr_loss, supcon_loss
from .meta import (adapt, maml_adapt_evaluate, maml_objective, meta_train_maml,
                   meta_train_protonet, meta_train_relationnet, protonet_loss, relation_loss)
from .supervised import distill, train_monolithic
from .transfer import (EVAL_HEADS, embed_dataset, evaluate_episodes, finetune_episode,
                       fit_gradient_head, predict_with_head, transfer_plain)

__all__ = [name for name in dir() if not name.startswith("_")]
