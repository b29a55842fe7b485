"""3D two-stage nodule detector/segmenter: Python bindings."""

from ._core import (
    Annotation,
    Box3,
    Candidate,
    ConfigError,
    ContractError,
    DataError,
    Detector,
    Error,
    PhantomSpec,
    dilate_box,
    dsc,
    froc,
    generate_case,
    hausdorff_mm,
    iou3d,
    nms3d,
    read_annotations,
    read_candidates_csv,
    read_mhd,
    save_random_model,
    sliding_windows,
    volume_correlation,
    write_candidates_csv,
    write_mhd,
    write_phantom_dataset,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
