"""KV cache eviction with value-aware scores and dynamic head and layer budgets."""

from kvevict.cache import BudgetPlan, LayerKVCache
from kvevict.engine import (
    BUNDLES,
    PolicyConfig,
    bundle,
    compress,
    compress_layer,
    head_evict,
    layer_evict,
    lava_pipeline,
    baseline_pipeline,
)
from kvevict.errors import (
    ConfigError,
    ConstraintViolation,
    DimensionError,
    DomainError,
    FeasibilityError,
    InfeasibleBudgetError,
    KVEvictError,
    StateError,
)
from kvevict.kernels import BACKEND
from kvevict.metrics import LossReport
from kvevict.toymodel import ModelConfig, init_random_model, prefill, random_inputs

__version__ = "0.1.0"
