from .functional import cosine_matrix, cosine_similarity, row_cosine, row_cosine_backward, softmax
from .fusion import FusionHead, bilinear_matrix, multiscale_fuse_forward, upsample
from .gradcheck import GradCheckReport, finite_difference_check
from .head import AlignmentHead, GradientBuffer, Layer, head_backward, head_forward
from .tensor import as_tensor, load_tensor, save_tensor

__all__ = [
    "AlignmentHead", "FusionHead", "GradCheckReport", "GradientBuffer", "Layer",
    "as_tensor", "bilinear_matrix", "cosine_matrix", "cosine_similarity",
    "finite_difference_check", "head_backward", "head_forward", "load_tensor",
    "multiscale_fuse_forward", "row_cosine", "row_cosine_backward", "save_tensor",
    "softmax", "upsample",
]
