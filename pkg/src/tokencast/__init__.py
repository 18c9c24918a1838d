"""Token-based generative nowcasting of radar reflectivity at desk scale.

The pipeline has two trained stages: a quantized convolutional autoencoder
that turns reflectivity maps into discrete codebook tokens, and a causal
transformer that predicts the next token of a flattened spatiotemporal
sequence. Ensembles come from repeated multinomial sampling of the
forecaster's categorical output. The package also ships the synthetic data
generator and the verification metrics used to judge the forecasts.
"""

__version__ = "0.1.0"

from tokencast.grid import (
    PreprocessSpec,
    RadarSequence,
    ReflectivityField,
    RainRateField,
    clip_and_quantize,
    dbz_to_rainrate,
    rainrate_to_dbz,
)

__all__ = [
    "PreprocessSpec",
    "RadarSequence",
    "ReflectivityField",
    "RainRateField",
    "clip_and_quantize",
    "dbz_to_rainrate",
    "rainrate_to_dbz",
    "__version__",
]
