"""YAML configuration for the edge server, camera nodes and simulation scenarios."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import yaml

from .controller import DEFAULT_INTEGRAL_GAIN, DEFAULT_PROPORTIONAL_GAIN, ControllerConfig
from .frames import QosBound
from .memlog import LogConfig
from .netsim import ChannelModel, ClosedLoopScenario
from .profiles import (
    LinearLatencyModel,
    ProfileTable,
    fit_latency_model,
    load_latency_calibration,
    load_profile,
    synthetic_profile,
)
from .wire import parse_address

DEFAULT_KEY_ENV = "VIDBUS_LOG_KEY"
MB = 1024 * 1024


@dataclass
class ControllerSettings:
    enabled: bool = True
    proportional: float = DEFAULT_PROPORTIONAL_GAIN
    integral: float = DEFAULT_INTEGRAL_GAIN
    error_threshold_ms: float = 5.0
    sample_window: int = 20
    recover_quality: bool = False

    def build(self, model: LinearLatencyModel, profile: ProfileTable) -> ControllerConfig:
        return ControllerConfig.from_gains(
            model,
            profile,
            self.proportional,
            self.integral,
            error_threshold_ms=self.error_threshold_ms,
            sample_window=self.sample_window,
            recover_quality=self.recover_quality,
        )


@dataclass
class SyntheticProfileSettings:
    min_size_bytes: int = 100_000
    native_size_bytes: int = 1_000_000
    count: int = 30
    knee_bytes: float = 25_000.0


@dataclass
class LinkSettings:
    intercept_ms: float = 20.0
    slope_ms_per_byte: float = 1e-9
    jitter: float = 0.0
    seed: int = 0


@dataclass
class EdgeConfig:
    listen: str = "127.0.0.1:7400"
    persist_dir: Optional[Path] = None
    capacity_mb: float = 256.0
    segments: int = 16
    auth_token: str = ""
    encrypt_at_rest: bool = False
    key_env: str = DEFAULT_KEY_ENV

    def log_config(self) -> LogConfig:
        key = load_encryption_key(self.key_env) if self.encrypt_at_rest else None
        return LogConfig(
            capacity_bytes=int(self.capacity_mb * MB),
            segment_count=self.segments,
            persist_dir=self.persist_dir,
            encrypt_at_rest=self.encrypt_at_rest,
            encryption_key=key,
        )


@dataclass
class CamConfig:
    edge: str = "127.0.0.1:7400"
    listen: str = "127.0.0.1:0"
    camera_id: str = "cam0"
    width: int = 1920
    height: int = 1080
    fps: float = 5.0
    profile: Optional[Path] = None
    synthetic_profile: SyntheticProfileSettings = field(default_factory=SyntheticProfileSettings)
    latency_calib: Optional[Path] = None
    intercept_ms: float = 6.79
    slope_ms_per_byte: float = 3.97e-5
    source: str = "synthetic"
    source_dir: Optional[Path] = None
    frames: Optional[int] = None
    duration_s: Optional[float] = None
    controller: ControllerSettings = field(default_factory=ControllerSettings)
    retries: int = 3
    backoff_s: float = 0.5
    auth_token: str = ""
    edge_token: str = ""
    capacity_mb: float = 64.0
    segments: int = 16
    persist_dir: Optional[Path] = None
    link: Optional[LinkSettings] = None

    def load_profile(self) -> ProfileTable:
        if self.profile is not None:
            return load_profile(self.profile)
        s = self.synthetic_profile
        return synthetic_profile(s.min_size_bytes, s.native_size_bytes, s.count, s.knee_bytes)

    def latency_model(self) -> LinearLatencyModel:
        if self.latency_calib is not None:
            return fit_latency_model(load_latency_calibration(self.latency_calib))
        return LinearLatencyModel(slope=self.slope_ms_per_byte, intercept=self.intercept_ms)

    def log_config(self) -> LogConfig:
        return LogConfig(
            capacity_bytes=int(self.capacity_mb * MB),
            segment_count=self.segments,
            persist_dir=self.persist_dir,
        )

    def link_model(self) -> Optional[ChannelModel]:
        if self.link is None:
            return None
        return ChannelModel(
            base=LinearLatencyModel(slope=self.link.slope_ms_per_byte, intercept=self.link.intercept_ms),
            jitter=self.link.jitter,
            seed=self.link.seed,
        )


@dataclass
class GateSettings:
    step_s: float = 5.0
    settle_window_s: float = 1.0
    max_settle_s: float = 1.0
    min_compliance: float = 0.95


@dataclass
class ScenarioConfig:
    name: str = "scenario"
    calibration: List[Tuple[float, float]] = field(default_factory=list)
    calibration_file: Optional[Path] = None
    slope_ms_per_byte: Optional[float] = None
    intercept_ms: Optional[float] = None
    jitter: float = 0.05
    seed: int = 0
    schedule: List[Tuple[float, float]] = field(default_factory=list)
    profile: Optional[Path] = None
    synthetic_profile: SyntheticProfileSettings = field(default_factory=SyntheticProfileSettings)
    latency_max_ms: float = 100.0
    accuracy_min: float = 95.0
    fps: float = 5.0
    duration_s: float = 20.0
    cameras: int = 1
    controller: ControllerSettings = field(default_factory=ControllerSettings)
    node_multipliers: List[float] = field(default_factory=list)
    stage_ms: Dict[str, float] = field(default_factory=dict)
    gate: GateSettings = field(default_factory=GateSettings)

    def latency_model(self) -> LinearLatencyModel:
        if self.slope_ms_per_byte is not None and self.intercept_ms is not None:
            return LinearLatencyModel(slope=self.slope_ms_per_byte, intercept=self.intercept_ms)
        if self.calibration_file is not None:
            return fit_latency_model(load_latency_calibration(self.calibration_file))
        return fit_latency_model(self.calibration)

    def load_profile(self) -> ProfileTable:
        if self.profile is not None:
            return load_profile(self.profile)
        s = self.synthetic_profile
        return synthetic_profile(s.min_size_bytes, s.native_size_bytes, s.count, s.knee_bytes)

    def build(self, profile: Optional[ProfileTable] = None) -> ClosedLoopScenario:
        model = self.latency_model()
        table = profile or self.load_profile()
        channel = ChannelModel(
            base=model,
            interference_schedule=[(t_s * 1000.0, m) for t_s, m in self.schedule],
            jitter=self.jitter,
            seed=self.seed,
        )
        return ClosedLoopScenario(
            channel=channel,
            profile=table,
            bound=QosBound(self.latency_max_ms, self.accuracy_min),
            model=model,
            fps=self.fps,
            duration_s=self.duration_s,
            cameras=self.cameras,
            controller_enabled=self.controller.enabled,
            controller=self.controller.build(model, table),
            name=self.name,
        )


# -- loading ---------------------------------------------------------------------


def _read_yaml(path: Path) -> Dict[str, Any]:
    data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: top level must be a mapping.")
    return data


def _section(data: Dict[str, Any], key: str) -> Dict[str, Any]:
    value = data.get(key) or {}
    if not isinstance(value, dict):
        raise ValueError(f"'{key}' must be a mapping.")
    return value


def _optional_path(value: Any, base: Path) -> Optional[Path]:
    if value in (None, ""):
        return None
    return _resolve_with_base(str(value), base)


def _controller(data: Dict[str, Any]) -> ControllerSettings:
    section = _section(data, "controller")
    return ControllerSettings(
        enabled=bool(section.get("enabled", True)),
        proportional=float(section.get("proportional", DEFAULT_PROPORTIONAL_GAIN)),
        integral=float(section.get("integral", DEFAULT_INTEGRAL_GAIN)),
        error_threshold_ms=float(section.get("error_threshold_ms", 5.0)),
        sample_window=int(section.get("sample_window", 20)),
        recover_quality=bool(section.get("recover_quality", False)),
    )


def _synthetic(data: Dict[str, Any]) -> SyntheticProfileSettings:
    section = _section(data, "synthetic_profile")
    return SyntheticProfileSettings(
        min_size_bytes=int(section.get("min_size_bytes", 100_000)),
        native_size_bytes=int(section.get("native_size_bytes", 1_000_000)),
        count=int(section.get("count", 30)),
        knee_bytes=float(section.get("knee_bytes", 25_000.0)),
    )


def _pairs(value: Any, what: str) -> List[Tuple[float, float]]:
    pairs: List[Tuple[float, float]] = []
    for item in value or []:
        if not isinstance(item, (list, tuple)) or len(item) != 2:
            raise ValueError(f"Each {what} entry must be a [a, b] pair, got {item!r}.")
        pairs.append((float(item[0]), float(item[1])))
    return pairs


def load_edge_config(path: str | Path) -> EdgeConfig:
    config_path = Path(path)
    data = _read_yaml(config_path)
    base = config_path.parent
    config = EdgeConfig(
        listen=str(data.get("listen", "127.0.0.1:7400")),
        persist_dir=_optional_path(data.get("persist_dir"), base),
        capacity_mb=float(data.get("capacity_mb", 256.0)),
        segments=int(data.get("segments", 16)),
        auth_token=str(data.get("auth_token", "") or ""),
        encrypt_at_rest=bool(data.get("encrypt_at_rest", False)),
        key_env=str(data.get("key_env", DEFAULT_KEY_ENV)),
    )
    validate_edge_config(config)
    return config


def validate_edge_config(config: EdgeConfig) -> None:
    parse_address(config.listen)
    if config.capacity_mb <= 0:
        raise ValueError("capacity_mb must be > 0.")
    if config.segments < 2:
        raise ValueError("segments must be >= 2.")
    if config.encrypt_at_rest and config.persist_dir is None:
        raise ValueError("encrypt_at_rest needs a persist_dir.")


def load_cam_config(path: str | Path) -> CamConfig:
    config_path = Path(path)
    data = _read_yaml(config_path)
    base = config_path.parent
    link_data = data.get("link")
    link = None
    if isinstance(link_data, dict):
        link = LinkSettings(
            intercept_ms=float(link_data.get("intercept_ms", 20.0)),
            slope_ms_per_byte=float(link_data.get("slope_ms_per_byte", 1e-9)),
            jitter=float(link_data.get("jitter", 0.0)),
            seed=int(link_data.get("seed", 0)),
        )
    frames = data.get("frames")
    duration = data.get("duration_s")
    config = CamConfig(
        edge=str(data.get("edge", "127.0.0.1:7400")),
        listen=str(data.get("listen", "127.0.0.1:0")),
        camera_id=str(data.get("camera_id", "cam0")),
        width=int(data.get("width", 1920)),
        height=int(data.get("height", 1080)),
        fps=float(data.get("fps", 5.0)),
        profile=_optional_path(data.get("profile"), base),
        synthetic_profile=_synthetic(data),
        latency_calib=_optional_path(data.get("latency_calib"), base),
        intercept_ms=float(data.get("intercept_ms", 6.79)),
        slope_ms_per_byte=float(data.get("slope_ms_per_byte", 3.97e-5)),
        source=str(data.get("source", "synthetic")),
        source_dir=_optional_path(data.get("source_dir"), base),
        frames=int(frames) if frames is not None else None,
        duration_s=float(duration) if duration is not None else None,
        controller=_controller(data),
        retries=int(data.get("retries", 3)),
        backoff_s=float(data.get("backoff_s", 0.5)),
        auth_token=str(data.get("auth_token", "") or ""),
        edge_token=str(data.get("edge_token", "") or ""),
        capacity_mb=float(data.get("capacity_mb", 64.0)),
        segments=int(data.get("segments", 16)),
        persist_dir=_optional_path(data.get("persist_dir"), base),
        link=link,
    )
    validate_cam_config(config)
    return config


def validate_cam_config(config: CamConfig) -> None:
    parse_address(config.edge)
    parse_address(config.listen)
    if not config.camera_id:
        raise ValueError("camera_id must be non-empty.")
    if config.fps <= 0:
        raise ValueError("fps must be > 0.")
    if config.width < 1 or config.height < 1:
        raise ValueError("width and height must be >= 1.")
    if config.retries < 0:
        raise ValueError("retries must be >= 0.")
    if config.backoff_s < 0:
        raise ValueError("backoff_s must be >= 0.")
    if config.source not in {"synthetic", "directory"}:
        raise ValueError("source must be 'synthetic' or 'directory'.")
    if config.source == "directory" and config.source_dir is None:
        raise ValueError("source 'directory' needs source_dir.")
    for label, value in (
        ("profile", config.profile),
        ("latency_calib", config.latency_calib),
        ("source_dir", config.source_dir),
    ):
        if value is not None and not value.exists():
            raise FileNotFoundError(f"{label} not found: {value}")
    _validate_controller(config.controller)


def load_scenario_config(path: str | Path) -> ScenarioConfig:
    config_path = Path(path)
    data = _read_yaml(config_path)
    base = config_path.parent
    channel = _section(data, "channel")
    bound = _section(data, "bound")
    gate = _section(data, "gate")
    config = ScenarioConfig(
        name=str(data.get("name", config_path.stem)),
        calibration=_pairs(channel.get("calibration"), "calibration"),
        calibration_file=_optional_path(channel.get("calibration_file"), base),
        slope_ms_per_byte=_optional_float(channel.get("slope_ms_per_byte")),
        intercept_ms=_optional_float(channel.get("intercept_ms")),
        jitter=float(channel.get("jitter", 0.05)),
        seed=int(channel.get("seed", 0)),
        schedule=_pairs(channel.get("schedule"), "schedule"),
        profile=_optional_path(data.get("profile"), base),
        synthetic_profile=_synthetic(data),
        latency_max_ms=float(bound.get("latency_ms", 100.0)),
        accuracy_min=float(bound.get("accuracy_min", 95.0)),
        fps=float(data.get("fps", 5.0)),
        duration_s=float(data.get("duration_s", 20.0)),
        cameras=int(data.get("cameras", 1)),
        controller=_controller(data),
        node_multipliers=[float(m) for m in data.get("node_multipliers", []) or []],
        stage_ms={str(k): float(v) for k, v in (_section(data, "stage_ms")).items()},
        gate=GateSettings(
            step_s=float(gate.get("step_s", 5.0)),
            settle_window_s=float(gate.get("settle_window_s", 1.0)),
            max_settle_s=float(gate.get("max_settle_s", 1.0)),
            min_compliance=float(gate.get("min_compliance", 0.95)),
        ),
    )
    validate_scenario_config(config)
    return config


def _optional_float(value: Any) -> Optional[float]:
    return None if value is None else float(value)


def validate_scenario_config(config: ScenarioConfig) -> None:
    has_line = config.slope_ms_per_byte is not None and config.intercept_ms is not None
    if not has_line and config.calibration_file is None and len(config.calibration) < 2:
        raise ValueError(
            "Channel needs slope_ms_per_byte + intercept_ms, a calibration_file, "
            "or at least two calibration points."
        )
    if config.calibration_file is not None and not config.calibration_file.exists():
        raise FileNotFoundError(f"calibration_file not found: {config.calibration_file}")
    if config.profile is not None and not config.profile.exists():
        raise FileNotFoundError(f"profile not found: {config.profile}")
    if not 0 <= config.jitter < 1:
        raise ValueError("jitter must be in [0, 1).")
    times = [t for t, _ in config.schedule]
    if any(b <= a for a, b in zip(times, times[1:])):
        raise ValueError("schedule times must be strictly increasing.")
    if any(m < 1 for _, m in config.schedule) or any(m < 1 for m in config.node_multipliers):
        raise ValueError("Interference multipliers must be >= 1.")
    QosBound(config.latency_max_ms, config.accuracy_min)
    if config.fps <= 0:
        raise ValueError("fps must be > 0.")
    if config.duration_s < 0:
        raise ValueError("duration_s must be >= 0.")
    if config.cameras < 1:
        raise ValueError("cameras must be >= 1.")
    if not 0 < config.gate.min_compliance <= 1:
        raise ValueError("gate.min_compliance must be in (0, 1].")
    if any(v < 0 for v in config.stage_ms.values()):
        raise ValueError("stage_ms values must be >= 0.")
    _validate_controller(config.controller)


def _validate_controller(settings: ControllerSettings) -> None:
    if settings.proportional < 0 or settings.integral < 0:
        raise ValueError("Controller gains must be >= 0.")
    if settings.error_threshold_ms <= 0:
        raise ValueError("error_threshold_ms must be > 0.")
    if settings.sample_window < 1:
        raise ValueError("sample_window must be >= 1.")


def load_encryption_key(env_name: str = DEFAULT_KEY_ENV) -> bytes:
    raw = os.environ.get(env_name, "").strip()
    if not raw:
        raise ValueError(f"Encryption at rest is on but ${env_name} is not set.")
    try:
        key = bytes.fromhex(raw)
    except ValueError as exc:
        raise ValueError(f"${env_name} must be hex.") from exc
    if len(key) not in (16, 24, 32):
        raise ValueError(f"${env_name} must hold a 128, 192 or 256-bit key.")
    return key


def _resolve_with_base(path_str: str, base: Path) -> Path:
    path_obj = Path(path_str)
    if path_obj.is_absolute():
        return path_obj
    for root in [base, *base.parents]:
        candidate = (root / path_obj).resolve()
        if candidate.exists():
            return candidate
    # unresolved paths stay relative to the config file
    return (base / path_obj).resolve()
