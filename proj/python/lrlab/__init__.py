"""Python access to the lrlab C++ core."""

from ._lrlab import (  # noqa: F401
    LrlabError,
    NumericsError,
    dense_cost,
    effective_rank,
    esd_ks_distance,
    frobenius_decay_penalty,
    load_checkpoint,
    materialize_config,
    mp_cdf,
    mp_density,
    mp_edges,
    normalized_update_ratios,
    run_verify_suite,
    singular_values,
    spectral_init,
    spectral_ones_init,
    svd,
    update_identity_check,
)
