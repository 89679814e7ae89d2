"""Reference methods: Bayesian CLS / CLS-GP and NIPALS PLS."""
from .cls import ClsConfig, ClsState, cls_bound, cls_elbo, cls_fit
from .pls import PlsModel, pls_classify, pls_fit, pls_predict, pls_select_components

__all__ = [
    "ClsConfig",
    "ClsState",
    "cls_bound",
    "cls_elbo",
    "cls_fit",
    "PlsModel",
    "pls_classify",
    "pls_fit",
    "pls_predict",
    "pls_select_components",
]
