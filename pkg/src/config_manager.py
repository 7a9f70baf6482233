"""
Configuration Management Module

This module provides centralized run configuration for EdgeFM, loaded from a
TOML file, then environment variables (EDGEFM_<SECTION>_<KEY>), then explicit
overrides from the command line.
"""

import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import toml

from src.customizer import TrainConfig, Variant
from src.embeddings import PromptTemplate, TextEmbeddingPool
from src.error_handler import InvalidConfigError
from src.fm_oracle import SyntheticWorld, build_pool, world_create
from src.model_select import BYTES_PER_PARAMETER, DeviceProfile, ModelSpec, Priority, reference_specs
from src.netadapt import BandwidthTrace, LatencyModel
from src.simulator import Policy, Scenario, ScheduleEntry
from src.structured_logger import get_logger

logger = get_logger("edgefm.config")

ENV_PREFIX = "EDGEFM"


@dataclass
class AppSettings:
    name: str = "edgefm"
    version: str = "1.0.0"
    environment: str = "development"
    seed: int = 0


@dataclass
class LoggingConfig:
    level: str = "INFO"
    format: str = "simple"  # simple, structured
    enable_file_logging: bool = False
    log_directory: str = "logs"
    enable_trace_ids: bool = True


@dataclass
class WorldConfig:
    """Synthetic world the foundation model stands in for."""

    seed: int = 7
    num_classes: int = 10
    input_dim: int = 256
    embed_dim: int = 64
    noise_sigma: float = 0.1
    fm_noise_sigma: float = 0.0
    class_names: List[str] = field(default_factory=list)


@dataclass
class PoolConfig:
    prompt: str = "a photo of a {CLS}."
    classes: List[str] = field(default_factory=list)  # empty: the starting classes
    distractors: List[str] = field(default_factory=list)


@dataclass
class TrainSettings:
    lam: float = 0.5
    tau: float = 1.0
    alpha_vis: float = 1.0
    learning_rate: float = 0.05
    epochs: int = 40
    batch_size: int = 32


@dataclass
class CustomizeConfig:
    variants: List[str] = field(default_factory=lambda: [v.value for v in Variant])
    samples: int = 800


@dataclass
class ProfileConfig:
    device_id: str = "jetson_nano"
    task_tag: str = "vision"
    memory_budget: float = 64e6
    flops_budget: float = 2e9
    latency_bound_ms: float = 30.0
    accuracy_degradation_bound: float = 0.05
    priority: str = "latency"


@dataclass
class ModelSpecConfig:
    arch_id: str = ""
    task_tag: str = "vision"
    accuracy: float = 0.0
    flops: float = 0.0
    memory: float = 0.0
    params: float = 0.0
    hidden_dim: int = 64
    latency_edge: Dict[str, float] = field(default_factory=dict)


@dataclass
class LatencyConfig:
    sample_bits: float = 3 * 224 * 224 * 8
    t_edge_ms: float = 20.0
    t_cloud_ms: float = 10.0
    propagation_ms: float = 5.0
    measure: bool = False


@dataclass
class NetAdaptConfig:
    grid_step: float = 0.05
    beta: float = 0.5
    probe_interval: float = 1.0
    calibration_size: int = 200
    reference_bandwidth_mbps: float = 55.0


@dataclass
class ScheduleEntryConfig:
    t_seconds: float = 0.0
    classes: List[str] = field(default_factory=list)


@dataclass
class ScenarioConfig:
    arrival_rate: float = 2.0
    duration: float = 600.0
    update_interval: float = 200.0
    retrain_cost: float = 10.0
    min_upload: int = 100
    bootstrap_samples: int = 400
    policy: str = "adaptive"
    fixed_threshold: float = 0.5
    upload_threshold: float = 0.99
    variant: str = "semantic"
    window_seconds: float = 50.0
    edge_workers: int = 4
    cloud_workers: int = 4
    initial_classes: List[str] = field(default_factory=list)
    schedule: List[ScheduleEntryConfig] = field(default_factory=list)


@dataclass
class TraceConfig:
    path: str = ""  # empty: constant bandwidth
    constant_mbps: float = 55.0


@dataclass
class LiveConfig:
    host: str = "127.0.0.1"
    port: int = 5055
    samples: int = 200
    probe_every: int = 10
    probe_bytes: int = 65536
    max_connections: int = 1


@dataclass
class OutputConfig:
    directory: str = "./output"
    write_audit_log: bool = True


SECTIONS = (
    "app",
    "logging",
    "world",
    "pool",
    "train",
    "customize",
    "profile",
    "latency",
    "netadapt",
    "scenario",
    "trace",
    "live",
    "output",
)


@dataclass
class RunConfig:
    """Every setting a command needs, one dataclass per TOML section."""

    app: AppSettings = field(default_factory=AppSettings)
    logging: LoggingConfig = field(default_factory=LoggingConfig)
    world: WorldConfig = field(default_factory=WorldConfig)
    pool: PoolConfig = field(default_factory=PoolConfig)
    train: TrainSettings = field(default_factory=TrainSettings)
    customize: CustomizeConfig = field(default_factory=CustomizeConfig)
    profile: ProfileConfig = field(default_factory=ProfileConfig)
    model_pool: List[ModelSpecConfig] = field(default_factory=list)
    latency: LatencyConfig = field(default_factory=LatencyConfig)
    netadapt: NetAdaptConfig = field(default_factory=NetAdaptConfig)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    trace: TraceConfig = field(default_factory=TraceConfig)
    live: LiveConfig = field(default_factory=LiveConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    base_dir: str = "."

    def resolve_path(self, value: Union[str, Path]) -> Path:
        """Relative paths are taken from the directory holding the config file."""
        path = Path(value)
        return path if path.is_absolute() else Path(self.base_dir) / path

    def world_class_names(self) -> List[str]:
        if self.world.class_names:
            return list(self.world.class_names)
        return [f"class_{i:02d}" for i in range(self.world.num_classes)]

    def pool_class_names(self) -> List[str]:
        """Configured pool classes, else every world class no schedule entry introduces later."""
        if self.pool.classes:
            return list(self.pool.classes)
        scheduled = {name for entry in self.scenario.schedule for name in entry.classes}
        return [name for name in self.world_class_names() if name not in scheduled]

    def create_world(self) -> SyntheticWorld:
        w = self.world
        return world_create(
            seed=w.seed,
            num_classes=len(self.world_class_names()),
            input_dim=w.input_dim,
            embed_dim=w.embed_dim,
            noise_sigma=w.noise_sigma,
            fm_noise_sigma=w.fm_noise_sigma,
            class_names=self.world_class_names(),
        )

    def create_pool(self, world: SyntheticWorld) -> TextEmbeddingPool:
        names = self.pool_class_names() + list(self.pool.distractors)
        return build_pool(world, names, PromptTemplate(self.pool.prompt))

    def get_train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(
            lam=t.lam,
            tau=t.tau,
            alpha_vis=t.alpha_vis,
            learning_rate=t.learning_rate,
            epochs=t.epochs,
            batch_size=t.batch_size,
            seed=self.app.seed,
        )

    def get_profile(self) -> DeviceProfile:
        p = self.profile
        return DeviceProfile(
            device_id=p.device_id,
            task_tag=p.task_tag,
            memory_budget=p.memory_budget,
            flops_budget=p.flops_budget,
            latency_bound_ms=p.latency_bound_ms,
            accuracy_degradation_bound=p.accuracy_degradation_bound,
            priority=Priority.parse(p.priority),
        )

    def get_model_specs(self) -> List[ModelSpec]:
        if not self.model_pool:
            return reference_specs()
        return [
            ModelSpec(
                arch_id=m.arch_id,
                task_tag=m.task_tag,
                accuracy=m.accuracy,
                flops=m.flops,
                memory=m.memory if m.memory > 0 else m.params * BYTES_PER_PARAMETER,
                latency_edge=dict(m.latency_edge),
                params=m.params,
                hidden_dim=m.hidden_dim,
            )
            for m in self.model_pool
        ]

    def get_latency_model(self) -> LatencyModel:
        return LatencyModel(
            dim_bits=self.latency.sample_bits,
            t_edge_ms=self.latency.t_edge_ms,
            t_cloud_ms=self.latency.t_cloud_ms,
        )

    def get_trace(self, override: Optional[Union[str, Path]] = None) -> BandwidthTrace:
        if override is not None:
            return BandwidthTrace.from_csv(override)
        if self.trace.path:
            return BandwidthTrace.from_csv(self.resolve_path(self.trace.path))
        return BandwidthTrace.constant(self.trace.constant_mbps)

    def get_scenario(self, trace: Optional[BandwidthTrace] = None) -> Scenario:
        s = self.scenario
        return Scenario(
            trace=trace or self.get_trace(),
            profile=self.get_profile(),
            world_seed=self.world.seed,
            num_classes=len(self.world_class_names()),
            input_dim=self.world.input_dim,
            embed_dim=self.world.embed_dim,
            noise_sigma=self.world.noise_sigma,
            fm_noise_sigma=self.world.fm_noise_sigma,
            class_names=self.world_class_names(),
            initial_classes=list(s.initial_classes) or None,
            distractor_classes=list(self.pool.distractors),
            prompt=self.pool.prompt,
            schedule=[ScheduleEntry(e.t_seconds, tuple(e.classes)) for e in s.schedule],
            arrival_rate=s.arrival_rate,
            duration=s.duration,
            update_interval=s.update_interval,
            retrain_cost=s.retrain_cost,
            min_upload=s.min_upload,
            calibration_size=self.netadapt.calibration_size,
            bootstrap_samples=s.bootstrap_samples,
            policy=Policy.parse(s.policy),
            fixed_threshold=s.fixed_threshold,
            model_specs=self.get_model_specs(),
            latency=self.get_latency_model(),
            propagation_ms=self.latency.propagation_ms,
            sample_bits=self.latency.sample_bits,
            probe_interval=self.netadapt.probe_interval,
            beta=self.netadapt.beta,
            v_thre=s.upload_threshold,
            grid_step=self.netadapt.grid_step,
            train_config=self.get_train_config(),
            variant=Variant.parse(s.variant),
            edge_workers=s.edge_workers,
            cloud_workers=s.cloud_workers,
            window_seconds=s.window_seconds,
            seed=self.app.seed,
        )

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data.pop("base_dir")
        return data


class ConfigManager:
    """Loads, overrides and validates the run configuration."""

    def __init__(
        self,
        config_file: Optional[Union[str, Path]] = None,
        overrides: Optional[Dict[str, Any]] = None,
    ):
        """
        Initialize the configuration manager.

        Args:
            config_file: Path to a TOML run configuration (defaults to the nearest
                config.toml in the current directory or its parents; built-in
                defaults when there is none)
            overrides: Dotted-path overrides applied last, e.g. {"app.seed": 3}
        """
        if config_file:
            self.config_file = Path(config_file)
            if not self.config_file.is_file():
                raise InvalidConfigError(
                    f"Config file not found: {self.config_file}",
                    recovery_suggestions=["Pass an existing file to --config"],
                )
        else:
            current_dir = Path.cwd()
            for path in [current_dir] + list(current_dir.parents):
                candidate = path / "config.toml"
                if candidate.exists():
                    self.config_file = candidate
                    break
            else:
                self.config_file = None

        self.env_prefix = ENV_PREFIX
        self.warnings: List[str] = []
        self._config = self._load_config(overrides or {})

    def _load_config(self, overrides: Dict[str, Any]) -> RunConfig:
        """Load configuration from TOML, environment variables, then overrides."""
        config = RunConfig()

        # 1. TOML file
        if self.config_file is not None:
            config.base_dir = str(self.config_file.parent)
            self._apply_toml_config(config, self._load_toml_config())

        # 2. Environment variables
        self._apply_env_overrides(config)

        # 3. Explicit overrides
        for attr_path, value in overrides.items():
            if value is not None:
                self._set_nested_attr(config, attr_path, value)
                logger.debug(f"Applied override: {attr_path} = {value}")

        return config

    def _load_toml_config(self) -> Dict[str, Any]:
        try:
            with open(self.config_file, "r", encoding="utf-8") as f:
                data = toml.load(f)
        except (toml.TomlDecodeError, OSError) as e:
            raise InvalidConfigError(f"Failed to load TOML config {self.config_file}: {e}") from e
        logger.info(f"Loaded TOML config from: {self.config_file}")
        return data

    def _apply_section(self, target: Any, data: Dict[str, Any], section: str) -> None:
        known = {f.name for f in fields(target)}
        for key, value in data.items():
            if key not in known:
                self.warnings.append(f"Unknown key [{section}] {key}")
                continue
            setattr(target, key, value)

    def _apply_toml_config(self, config: RunConfig, toml_data: Dict[str, Any]) -> None:
        """Apply TOML configuration data to RunConfig."""
        for section, section_data in toml_data.items():
            if section == "model_pool":
                config.model_pool = []
                for entry in section_data:
                    spec = ModelSpecConfig()
                    self._apply_section(spec, entry, "model_pool")
                    config.model_pool.append(spec)
            elif section in SECTIONS:
                section_data = dict(section_data)
                schedule = section_data.pop("schedule", None) if section == "scenario" else None
                self._apply_section(getattr(config, section), section_data, section)
                if schedule is not None:
                    config.scenario.schedule = []
                    for entry in schedule:
                        item = ScheduleEntryConfig()
                        self._apply_section(item, entry, "scenario.schedule")
                        config.scenario.schedule.append(item)
            else:
                self.warnings.append(f"Unknown section [{section}]")

    def _apply_env_overrides(self, config: RunConfig) -> None:
        """Apply EDGEFM_<SECTION>_<KEY> environment variables to scalar settings."""
        for section in SECTIONS:
            target = getattr(config, section)
            for f in fields(target):
                env_var = f"{self.env_prefix}_{section.upper()}_{f.name.upper()}"
                value = os.getenv(env_var)
                if value is None:
                    continue
                current = getattr(target, f.name)
                try:
                    setattr(target, f.name, self._convert(value, current))
                    logger.debug(f"Applied env override: {env_var} = {value}")
                except (ValueError, TypeError) as e:
                    self.warnings.append(f"Failed to apply env override {env_var}: {e}")

    def _convert(self, value: str, current: Any) -> Any:
        if isinstance(current, bool):
            return self._parse_bool(value)
        if isinstance(current, int):
            return int(value)
        if isinstance(current, float):
            return float(value)
        if isinstance(current, list):
            return [item.strip() for item in value.split(",") if item.strip()]
        if isinstance(current, str):
            return value
        raise TypeError(f"cannot override a {type(current).__name__} from the environment")

    def _parse_bool(self, value: str) -> bool:
        """Parse boolean value from string."""
        return value.lower() in ("true", "1", "yes", "on")

    def _set_nested_attr(self, obj: Any, attr_path: str, value: Any) -> None:
        """Set nested attribute using dot notation."""
        parts = attr_path.split(".")
        for part in parts[:-1]:
            obj = getattr(obj, part)
        if not hasattr(obj, parts[-1]):
            raise InvalidConfigError(f"Unknown setting {attr_path}")
        setattr(obj, parts[-1], value)

    def get_config(self) -> RunConfig:
        """Get the current configuration."""
        return self._config

    def validate_config(self) -> Dict[str, Any]:
        """Validate current configuration."""
        c = self._config
        errors: List[str] = []

        def check(condition: bool, message: str) -> None:
            if not condition:
                errors.append(message)

        check(c.world.num_classes >= 2, "world.num_classes must be at least 2")
        check(c.world.embed_dim > 0, "world.embed_dim must be positive")
        check(c.world.input_dim >= c.world.embed_dim, "world.input_dim must be >= world.embed_dim")
        check(c.world.noise_sigma >= 0, "world.noise_sigma must be non-negative")
        check(c.world.fm_noise_sigma >= 0, "world.fm_noise_sigma must be non-negative")
        if c.world.class_names:
            check(
                len(c.world.class_names) == c.world.num_classes,
                "world.class_names must list exactly num_classes names",
            )
        for name in c.pool.classes:
            check(name in c.world_class_names(), f"pool class {name!r} is not in the world; list it under distractors")
        for name in c.pool.distractors:
            check(name not in c.world_class_names(), f"distractor {name!r} collides with a world class")
        check("{CLS}" in c.pool.prompt and c.pool.prompt.count("{CLS}") == 1, "pool.prompt needs one {CLS}")

        check(0.0 <= c.train.lam <= 1.0, "train.lam must be in [0, 1]")
        check(c.train.tau > 0, "train.tau must be positive")
        check(c.train.alpha_vis >= 0, "train.alpha_vis must be non-negative")
        check(c.train.learning_rate > 0, "train.learning_rate must be positive")
        check(c.train.epochs >= 1, "train.epochs must be at least 1")
        check(c.train.batch_size >= 1, "train.batch_size must be at least 1")
        check(c.customize.samples >= 1, "customize.samples must be at least 1")
        for variant in c.customize.variants:
            check(variant in {v.value for v in Variant}, f"customize.variants: unknown variant {variant!r}")

        check(c.profile.priority in {p.value for p in Priority}, "profile.priority must be latency or accuracy")
        check(c.profile.memory_budget > 0 and c.profile.flops_budget > 0, "profile budgets must be positive")
        check(c.profile.latency_bound_ms > 0, "profile.latency_bound_ms must be positive")
        check(
            0.0 <= c.profile.accuracy_degradation_bound <= 1.0,
            "profile.accuracy_degradation_bound must be in [0, 1]",
        )
        try:
            specs = c.get_model_specs()
            check(
                any(s.task_tag == c.profile.task_tag for s in specs),
                f"model_pool has no entry for task {c.profile.task_tag!r}",
            )
            check(len({s.arch_id for s in specs}) == len(specs), "model_pool arch_id values must be unique")
        except Exception as e:
            errors.append(f"model_pool: {e}")

        check(
            c.latency.sample_bits > 0 and c.latency.t_edge_ms > 0 and c.latency.t_cloud_ms > 0,
            "latency values must be positive",
        )
        check(c.latency.propagation_ms >= 0, "latency.propagation_ms must be non-negative")
        check(0.0 < c.netadapt.grid_step <= 0.5, "netadapt.grid_step must be in (0, 0.5]")
        check(0.0 < c.netadapt.beta <= 1.0, "netadapt.beta must be in (0, 1]")
        check(c.netadapt.probe_interval > 0, "netadapt.probe_interval must be positive")
        check(c.netadapt.calibration_size >= 1, "netadapt.calibration_size must be at least 1")
        check(c.netadapt.reference_bandwidth_mbps > 0, "netadapt.reference_bandwidth_mbps must be positive")

        s = c.scenario
        check(s.arrival_rate > 0, "scenario.arrival_rate must be positive")
        check(s.duration > 0, "scenario.duration must be positive")
        check(s.update_interval > 0, "scenario.update_interval must be positive")
        check(s.retrain_cost >= 0, "scenario.retrain_cost must be non-negative")
        check(s.min_upload >= 1, "scenario.min_upload must be at least 1")
        check(s.bootstrap_samples >= 0, "scenario.bootstrap_samples must be non-negative")
        check(s.policy in {p.value for p in Policy}, f"scenario.policy: unknown policy {s.policy!r}")
        check(s.variant in {v.value for v in Variant}, f"scenario.variant: unknown variant {s.variant!r}")
        check(0.0 <= s.fixed_threshold <= 1.0, "scenario.fixed_threshold must be in [0, 1]")
        check(isinstance(s.upload_threshold, (int, float)), "scenario.upload_threshold must be a number")
        known = set(c.world_class_names())
        for entry in s.schedule:
            check(0.0 <= entry.t_seconds <= s.duration, f"schedule time {entry.t_seconds} outside [0, duration]")
            for name in entry.classes:
                check(name in known, f"scheduled class {name!r} is not in the world")
        check(c.trace.constant_mbps > 0, "trace.constant_mbps must be positive")
        check(c.live.probe_every >= 1, "live.probe_every must be at least 1")
        check(c.live.probe_bytes >= 0, "live.probe_bytes must be non-negative")
        check(0 <= c.live.port <= 65535, "live.port must be in [0, 65535]")
        check(c.live.max_connections >= 1, "live.max_connections must be at least 1")
        check(c.logging.format in ("simple", "structured"), "logging.format must be simple or structured")

        return {"is_valid": not errors, "warnings": list(self.warnings), "errors": errors}

    def require_valid(self) -> RunConfig:
        """Return the configuration or raise with every problem found."""
        results = self.validate_config()
        for warning in results["warnings"]:
            logger.warning(warning)
        if not results["is_valid"]:
            raise InvalidConfigError(
                f"Invalid configuration: {len(results['errors'])} problem(s)",
                details={"errors": results["errors"]},
                user_message="Invalid configuration:\n  - " + "\n  - ".join(results["errors"]),
            )
        return self._config

    def export_config(self, export_path: Union[str, Path]) -> Path:
        """Write the effective configuration as TOML."""
        export_file = Path(export_path)
        export_file.parent.mkdir(parents=True, exist_ok=True)
        with open(export_file, "w", encoding="utf-8") as f:
            toml.dump(self._config.to_dict(), f)
        logger.info(f"Configuration exported to {export_file}")
        return export_file

