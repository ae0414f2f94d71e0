"""Design-based effect estimation for Bernoulli-randomized A/B tests using
predictions from models trained on non-experimental (remnant) data."""

from .domain import ContrastDataset, Reason, UnitRecord, ValidationVerdict, binomial_test, validate_contrast
from .estimators import (
    EffectEstimate,
    ancova_ols,
    diff_in_means,
    estimate_all,
    loop_point,
    loop_variance,
    rebar,
)
from .imputers import (
    ForestParams,
    ImputerKind,
    ImputerSpec,
    LooImputation,
    impute_ensemble,
    impute_fixed_remnant,
    impute_loo_forest,
    impute_loo_ols,
    impute_zero,
)
from .inference import bh_adjust, by_adjust, variance_ratio, z_inference
from .remnant import RemnantModel, predict_remnant, train_remnant
from .subgroups import PopulationWeights, SubgroupScheme, decompose_bias, estimate_subgroups, pooled_terciles, post_stratify

__version__ = "0.1.0"
