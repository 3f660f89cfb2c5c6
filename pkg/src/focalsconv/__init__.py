"""CPU sparse 3D convolution: submanifold, regular and focal variants with analytic gradients."""
from .backbone import Backbone, BackboneSpec, StageSpec, build_backbone, preset
from .errors import (AlignmentError, BoundsError, CanonicalFormError, CapacityError, ConfigError,
                     FocalsConvError, FormatError, ModeError, NumericalError, ShapeError, StateError)
from .focal_conv import (FocalLossSpec, GtBox, focal_backward, focal_forward, focal_loss,
                         select_important, select_topk, voxel_targets)
from .kernel_map import KernelMap, KernelSpec, build_map, regular_map, submanifold_map
from .sparse_conv import ConvWeights, backward, dense_oracle, forward, set_num_threads
from .sparse_tensor import SparseTensor, build, read_svox, to_dense, write_svox

__version__ = "0.1.0"
