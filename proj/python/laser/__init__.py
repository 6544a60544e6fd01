"""Laser: LLM-augmented CTR prediction at desk scale (Python bindings)."""

from ._laser_core import (  # noqa: F401
    FormatError,
    InvalidArgument,
    LaserError,
    MismatchError,
    MoeAdapter,
    NotFoundError,
    UndefinedMetric,
    auc,
    bench_latency,
    cache_read,
    cache_write,
    cli,
    format_percent,
    logloss,
    rel_improvement,
    render_sample_prompt,
    synth_generate,
    two_way_softmax,
)

EXIT_OK, EXIT_INPUT, EXIT_MISMATCH, EXIT_DIVERGENCE, EXIT_MISSING = 0, 2, 3, 4, 5
