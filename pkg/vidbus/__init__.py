"""vidbus: latency-aware video-frame pub-sub between camera nodes and an edge server."""

from .broker import CamBroker, EdgeBroker
from .client import PublisherClient, ResilientSubscription, SubscriberClient, TimeoutPolicy
from .config import load_cam_config, load_edge_config, load_scenario_config
from .controller import ControllerConfig, LatencyController
from .frames import Colorspace, Frame, QosBound
from .knobs import IDENTITY, KnobSetting, apply_setting
from .memlog import LogConfig, MemLog, recover
from .netsim import ChannelModel, ClosedLoopScenario, run_closed_loop, run_node_scaling
from .profiles import LinearLatencyModel, ProfileTable, load_profile, synthetic_profile

__all__ = [
    "CamBroker",
    "EdgeBroker",
    "PublisherClient",
    "ResilientSubscription",
    "SubscriberClient",
    "TimeoutPolicy",
    "load_cam_config",
    "load_edge_config",
    "load_scenario_config",
    "ControllerConfig",
    "LatencyController",
    "Colorspace",
    "Frame",
    "QosBound",
    "IDENTITY",
    "KnobSetting",
    "apply_setting",
    "LogConfig",
    "MemLog",
    "recover",
    "ChannelModel",
    "ClosedLoopScenario",
    "run_closed_loop",
    "run_node_scaling",
    "LinearLatencyModel",
    "ProfileTable",
    "load_profile",
    "synthetic_profile",
]
