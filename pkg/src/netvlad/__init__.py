"""NetVLAD pooling, weakly supervised ranking loss and a synthetic place-recognition pipeline."""
from .descriptors import DescriptorDataset, DescriptorMap, ValidationError, flatten_map, l2_normalize_descriptors
from .encoders import NetVladEncoder, PoolEncoder
from .evaluation import RecallCurve, evaluate, recall_at_n, retrieve, spatial_nms
from .geodata import WorldConfig, build_tuples, generate_world, split_geographic
from .kmeans import kmeans
from .loss import LossConfig, TrainingTuple, best_positive, weak_triplet_loss
from .pooling import (
    NetVladParams,
    init_netvlad,
    max_pool,
    netvlad_backward,
    netvlad_forward,
    soft_assign,
    sum_pool,
    vlad_hard,
)
from .postprocess import WhiteningTransform, apply_whitening, fit_whitening
from .trainer import TrainConfig, train

__version__ = "0.1.0"
