"""Wave-optics simulation and depth decoding for learnable color-coded apertures."""

from ._core import (  # noqa: F401
    ConsistencyError,
    DomainError,
    IoError,
    ParseError,
    ShapeError,
    __version__,
    decode,
    default_config,
    evaluate_checkpoint,
    generate_scene,
    metrics,
    project_constraint,
    propagate,
    psf_stack,
    read_sdc,
    render,
    sobel,
    total_loss,
    write_sdc,
)
