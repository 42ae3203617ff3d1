import json
import uuid
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Optional

from dyadlab.logger import dyadlab_logger as logger


class ViolationTracker:
    """Utility class for collecting invariant checks and the witnesses of failed ones."""

    def __init__(self, command: str, seed: int):
        self.command = command
        self.seed = seed
        self.checks: Dict[str, bool] = {}
        self.violations: list[Dict[str, Any]] = []

    def log_violation(
        self,
        invariant: str,
        message: str,
        witness: Optional[Any] = None,
        additional_context: Optional[Dict[str, Any]] = None,
    ) -> str:
        """
        Record a failed invariant.

        Args:
            invariant: Name of the invariant that failed
            message: Human-readable description of the failure
            witness: Cube, input or value demonstrating the failure
            additional_context: Additional context information

        Returns:
            The UUID used for the violation record, derived from the seed, the
            invariant name and the position of the record
        """
        violation_uuid = str(
            uuid.uuid5(uuid.NAMESPACE_URL, f"dyadlab:{self.seed}:{invariant}:{len(self.violations)}")
        )
        self.checks[invariant] = False
        self.violations.append(
            {
                "uuid": violation_uuid,
                "invariant": invariant,
                "message": message,
                "witness": witness,
                "additional_context": additional_context or {},
                "seed": self.seed,
            }
        )
        # wall-clock time is logged, never serialized
        logger.warning(
            f"Invariant '{invariant}' failed at {datetime.now(timezone.utc).isoformat()}: {message}"
        )
        return violation_uuid

    def check(
        self,
        invariant: str,
        passed: bool,
        message: str = "",
        witness: Optional[Any] = None,
        additional_context: Optional[Dict[str, Any]] = None,
    ) -> bool:
        passed = bool(passed)
        if passed:
            # a single failure keeps the invariant failed
            self.checks.setdefault(invariant, True)
        else:
            self.log_violation(invariant, message, witness, additional_context)
        return passed

    @property
    def all_passed(self) -> bool:
        return not self.violations

    def summary(self) -> Dict[str, Any]:
        return {
            "command": self.command,
            "seed": self.seed,
            "passed": self.all_passed,
            "checks": dict(sorted(self.checks.items())),
            "violations": self.violations,
        }

    def write(self, path: Path | str) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            json.dump(self.summary(), f, indent=2, default=str)
        return path
