"""Numerical laboratory for Ricci-DeTurck flow of rough metrics on the torus."""
from ._accel import get_backend, set_backend, use_backend
from .tensor_core import (
    BackgroundMetric,
    MetricField,
    ScalarField,
    TensorField,
    TorusGrid,
    background_curvature,
    hcov_deriv,
    integrate,
    metric_inverse,
    tensor_norm_h,
)

__version__ = "0.1.0"
