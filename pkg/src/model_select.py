"""
Model Selection Module

Cloud-side pool of small-model architectures grouped by task, each row of the
accuracy-resource lookup table recording reference accuracy, FLOPS, memory and
per-device latency. Selection maximizes accuracy under memory and FLOPS budgets.
"""

import threading
from dataclasses import dataclass, field
from enum import Enum
from types import MappingProxyType
from typing import Dict, List, Mapping, Optional, Union

from src.error_handler import (
    DuplicateArchError,
    InvalidConfigError,
    NoFeasibleModelError,
    ValidationError,
)
from src.structured_logger import get_logger

logger = get_logger("edgefm.model_select")

BYTES_PER_PARAMETER = 4


class Priority(Enum):
    LATENCY = "latency"
    ACCURACY = "accuracy"

    @classmethod
    def parse(cls, value: Union[str, "Priority"]) -> "Priority":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise InvalidConfigError(
                f"Priority must be 'latency' or 'accuracy', got {value!r}"
            ) from None


@dataclass(frozen=True)
class ModelSpec:
    """One row of the accuracy-resource lookup table."""

    arch_id: str
    task_tag: str
    accuracy: float
    flops: float
    memory: float
    latency_edge: Mapping[str, float] = field(default_factory=dict)
    params: float = 0.0
    hidden_dim: int = 64

    def __post_init__(self):
        if not self.arch_id:
            raise ValidationError("arch_id must be non-empty")
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValidationError(f"{self.arch_id}: accuracy must be in [0, 1], got {self.accuracy}")
        if self.flops <= 0 or self.memory <= 0:
            raise ValidationError(f"{self.arch_id}: flops and memory must be positive")
        if self.hidden_dim < 1:
            raise ValidationError(f"{self.arch_id}: hidden_dim must be at least 1")
        object.__setattr__(self, "latency_edge", MappingProxyType(dict(self.latency_edge)))


@dataclass(frozen=True)
class DeviceProfile:
    device_id: str
    task_tag: str
    memory_budget: float
    flops_budget: float
    latency_bound_ms: float = 30.0
    accuracy_degradation_bound: float = 0.05
    priority: Priority = Priority.LATENCY

    def __post_init__(self):
        object.__setattr__(self, "priority", Priority.parse(self.priority))
        if self.memory_budget <= 0 or self.flops_budget <= 0:
            raise ValidationError(f"{self.device_id}: budgets must be positive")
        if self.latency_bound_ms <= 0:
            raise ValidationError(f"{self.device_id}: latency bound must be positive")
        if not 0.0 <= self.accuracy_degradation_bound <= 1.0:
            raise ValidationError(f"{self.device_id}: accuracy degradation bound must be in [0, 1]")


def reference_specs() -> List[ModelSpec]:
    """MobileNetV2 and ResNet18 rows as measured on a Jetson Nano; accuracy is ImageNet top-1."""
    return [
        ModelSpec(
            arch_id="mobilenet_v2",
            task_tag="vision",
            accuracy=0.719,
            flops=0.3e9,
            memory=3.5e6 * BYTES_PER_PARAMETER,
            latency_edge={"jetson_nano": 36.8},
            params=3.5e6,
            hidden_dim=64,
        ),
        ModelSpec(
            arch_id="resnet18",
            task_tag="vision",
            accuracy=0.698,
            flops=1.8e9,
            memory=11.7e6 * BYTES_PER_PARAMETER,
            latency_edge={"jetson_nano": 30.5},
            params=11.7e6,
            hidden_dim=96,
        ),
    ]


def _selection_key(spec: ModelSpec):
    return (-spec.accuracy, spec.flops, spec.memory, spec.arch_id)


def is_feasible(spec: ModelSpec, profile: DeviceProfile) -> bool:
    return spec.memory <= profile.memory_budget and spec.flops <= profile.flops_budget


class ModelPool:
    """
    Task-grouped architecture registry.

    Registrations are serialized under a lock and publish a fresh read-only
    snapshot; lookups read the current snapshot without locking.
    """

    def __init__(self, specs: Optional[List[ModelSpec]] = None):
        self._lock = threading.Lock()
        self._snapshot: Mapping[str, ModelSpec] = MappingProxyType({})
        for spec in specs or []:
            self.register(spec)

    def register(self, spec: ModelSpec) -> None:
        with self._lock:
            if spec.arch_id in self._snapshot:
                raise DuplicateArchError(
                    f"Architecture {spec.arch_id!r} is already registered",
                    details={"arch_id": spec.arch_id},
                )
            updated = dict(self._snapshot)
            updated[spec.arch_id] = spec
            self._snapshot = MappingProxyType(updated)
        logger.debug(f"Registered {spec.arch_id} for task {spec.task_tag}")

    def __len__(self) -> int:
        return len(self._snapshot)

    def __contains__(self, arch_id: object) -> bool:
        return arch_id in self._snapshot

    def get(self, arch_id: str) -> ModelSpec:
        try:
            return self._snapshot[arch_id]
        except KeyError:
            raise ValidationError(f"Architecture {arch_id!r} is not registered") from None

    def list(self, task_tag: Optional[str] = None) -> List[ModelSpec]:
        """Specs in registration order, optionally filtered by task."""
        return [s for s in self._snapshot.values() if task_tag is None or s.task_tag == task_tag]

    def select(self, profile: DeviceProfile) -> ModelSpec:
        """Most accurate feasible spec; ties by lower flops, lower memory, then arch_id."""
        candidates = self.list(profile.task_tag)
        if not candidates:
            raise NoFeasibleModelError(
                f"No architectures registered for task {profile.task_tag!r}",
                details={"device_id": profile.device_id},
            )
        feasible = [s for s in candidates if is_feasible(s, profile)]
        if not feasible:
            raise NoFeasibleModelError(
                f"No architecture for task {profile.task_tag!r} fits "
                f"memory={profile.memory_budget:.3g} B, flops={profile.flops_budget:.3g}",
                details={"device_id": profile.device_id, "candidates": [s.arch_id for s in candidates]},
            )
        chosen = min(feasible, key=_selection_key)
        logger.info(
            f"Selected {chosen.arch_id} for {profile.device_id} "
            f"(accuracy={chosen.accuracy:.3f}, {len(feasible)}/{len(candidates)} feasible)"
        )
        return chosen


def pool_register(pool: ModelPool, spec: ModelSpec) -> None:
    pool.register(spec)


def select(pool: ModelPool, profile: DeviceProfile) -> ModelSpec:
    return pool.select(profile)


class DeviceProfiler:
    """Registry of edge devices the cloud customizes models for."""

    def __init__(self, model_pool: ModelPool):
        self.model_pool = model_pool
        self._profiles: Dict[str, DeviceProfile] = {}
        self._lock = threading.Lock()

    def register(self, profile: DeviceProfile) -> None:
        with self._lock:
            self._profiles[profile.device_id] = profile
        logger.info(f"Profiled device {profile.device_id} ({profile.task_tag}, {profile.priority.value} priority)")

    def profile(self, device_id: str) -> DeviceProfile:
        try:
            return self._profiles[device_id]
        except KeyError:
            raise ValidationError(f"Device {device_id!r} has not been profiled") from None

    def devices(self) -> List[str]:
        return sorted(self._profiles)

    def select_for(self, device_id: str) -> ModelSpec:
        return self.model_pool.select(self.profile(device_id))
