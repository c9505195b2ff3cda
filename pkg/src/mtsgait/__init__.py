"""Gait embeddings from silhouette sequences via multi-hop channel switching."""

__version__ = "0.1.0"

from .backbone import (Model, ModelConfig, LayerSpec, build, count_parameters,
                       flops_estimate, load_model, preset_config, save_model)
from .head import Embedding, HeadConfig, horizontal_pyramid_pool, project, temporal_max_pool
from .losses import LossConfig, batch_all_triplet, combine, cross_entropy
from .metrics import RetrievalReport, evaluate, pairwise_distance
from .mts import MTSConfig, extractor_block, mts_forward, switch_channels
from .sampling import (BatchSpec, SamplerConfig, cyclic_sample,
                       noncyclic_sample, pk_batch, uniform_sample)
from .tensor import (Parameter, Tensor, conv2d, finite_diff_grad, leaky_relu,
                     linear, max_pool2d, no_grad)
from .trainer import TrainConfig, TrainingSet, adam_step, sgd_momentum_step, train
