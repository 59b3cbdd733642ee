"""Force- and stiffness-aware deformation correction for ultrasound B-mode images."""
from .fields import compose_flows, epe, flow_to_color, ncc, scale_flow_down, scale_flow_up, warp
from .net import DefCorNet, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "DefCorNet", "compose_flows", "epe", "flow_to_color", "load_checkpoint", "ncc",
    "save_checkpoint", "scale_flow_down", "scale_flow_up", "warp",
]
