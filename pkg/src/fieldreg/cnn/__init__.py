from .layers import bicubic_resize, bicubic_resize_adjoint, conv2d_forward
from .network import Network, ParameterSet, Tape, build_network, init_parameters
from .presets import fr9, fr21, fr25, preset
from .spec import BicubicResize, Conv, ConvSpec, DenseBlock, NetworkSpec, Stem, layer_shapes
from .checkpoint import checkpoint_from_bytes, checkpoint_read, checkpoint_to_bytes, checkpoint_write
