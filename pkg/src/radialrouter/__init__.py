"""Cost-aware LLM routing with a radial relay/satellite attention backbone.

The quickest entry point is the scikit-learn style estimator:

    from radialrouter import RadialRouter
    router = RadialRouter(costs=[0.1, 7.2], alpha=0.02).fit(X, Y)
    chosen = router.predict(X_new)

Lower-level pieces (numeric core, backbone, losses, clustering, training
loop, evaluation harness) live in the submodules.
"""

from .data import LLMCatalog, QueryRecord, reference_catalog
from .errors import RadialRouterError
from .estimator import RadialRouter
from .evaluation import EvalReport, Scenario
from .router import RoutingDecision
from .training import TrainConfig, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "EvalReport",
    "LLMCatalog",
    "QueryRecord",
    "RadialRouter",
    "RadialRouterError",
    "RoutingDecision",
    "Scenario",
    "TrainConfig",
    "load_checkpoint",
    "reference_catalog",
    "save_checkpoint",
    "__version__",
]
