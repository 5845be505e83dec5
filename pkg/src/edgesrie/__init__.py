"""EdgeSRIE: speckle-reducing image enhancement at the edge, desk scale.

A numpy/scipy toolkit covering the full pipeline: B-mode speckle simulation
from echogenicity maps, unsupervised training of a sub-20K-parameter
despeckle+deblur network, int8 quantization with an integer-only inference
path, classical Lee/SRAD baselines, and a CNR/SSNR/ENL/AGM/SSIM evaluation
harness. The `esrie` command line exposes every stage.
"""

from . import baselines, errors, image, metrics, net, nn, quant, rng, speckle, training
from .image import (
    Domain,
    Image,
    PhantomSpec,
    RoiKind,
    RoiSpec,
    make_phantom,
    read_image,
    to_decibel,
    to_display,
    to_linear_amplitude,
    write_image,
)
from .metrics import MetricReport, agm, cnr, enl, extract_profile, format_table, score, ssim, ssnr
from .net import Model, build_default, flop_count, forward, param_count
from .quant import calibrate, quantize, quantized_forward
from .rng import Stream
from .speckle import (
    BlurConfig,
    SpeckleSimConfig,
    build_psf,
    degrade,
    make_realizations,
    simulate_bmode,
)
from .training import CorpusEntry, TrainConfig, fuse, load_manifest, train_deblur, train_despeckle

__version__ = "0.1.0"

__all__ = [
    "BlurConfig",
    "CorpusEntry",
    "Domain",
    "Image",
    "MetricReport",
    "Model",
    "PhantomSpec",
    "RoiKind",
    "RoiSpec",
    "SpeckleSimConfig",
    "Stream",
    "TrainConfig",
    "agm",
    "baselines",
    "build_default",
    "build_psf",
    "calibrate",
    "cnr",
    "degrade",
    "enl",
    "errors",
    "extract_profile",
    "flop_count",
    "format_table",
    "forward",
    "fuse",
    "image",
    "load_manifest",
    "make_phantom",
    "make_realizations",
    "metrics",
    "net",
    "nn",
    "param_count",
    "quant",
    "quantize",
    "quantized_forward",
    "read_image",
    "rng",
    "score",
    "simulate_bmode",
    "speckle",
    "ssim",
    "ssnr",
    "to_decibel",
    "to_display",
    "to_linear_amplitude",
    "train_deblur",
    "train_despeckle",
    "training",
    "write_image",
]
