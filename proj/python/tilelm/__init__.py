"""Python bindings for the tilelm inference engine."""

from ._core import (
    CorruptFile,
    DuplicateSequence,
    InvalidConfig,
    MalformedTrace,
    Model,
    ModelConfig,
    OutOfTiles,
    PositionOutOfRange,
    PromptTooLong,
    ShapeMismatch,
    TilelmError,
    TilePool,
    UnknownSequence,
    aggregate,
    compare_alloc,
    decode,
    encode,
    gemm,
    gen_random_model,
    generate,
    load_model,
    reference_forward,
    save_model,
)

__all__ = [name for name in dir() if not name.startswith("_")]
