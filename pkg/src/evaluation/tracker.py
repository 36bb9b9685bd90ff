"""MLflow experiment tracking for federated runs."""

import math
from pathlib import Path
from typing import TYPE_CHECKING, Any, Dict, Optional

import mlflow
from mlflow.tracking import MlflowClient

from src.evaluation.metrics import MetricReport

if TYPE_CHECKING:
    from src.federation.records import RoundRecord


def flatten_params(tree: Dict[str, Any], prefix: str = "") -> Dict[str, str]:
    """Flatten a nested manifest dump into dotted MLflow parameter names."""
    flat: Dict[str, str] = {}
    for key, value in tree.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(flatten_params(value, f"{name}."))
        else:
            flat[name] = str(value)
    return flat


class ExperimentTracker:
    """MLflow experiment tracker for federated runs.

    Tracks manifest parameters, per-round accuracy curves, the final
    MetricReport and the run directory.
    """

    def __init__(
        self,
        experiment_name: str = "fedem-simulator",
        tracking_uri: Optional[str] = None,
    ):
        """Initialize experiment tracker.

        Args:
            experiment_name: Name of the MLflow experiment.
            tracking_uri: MLflow tracking server URI. Defaults to local ./mlruns.
        """
        self.experiment_name = experiment_name

        if tracking_uri:
            mlflow.set_tracking_uri(tracking_uri)
        else:
            mlruns_path = Path("mlruns").absolute()
            mlflow.set_tracking_uri(f"file://{mlruns_path}")

        self.client = MlflowClient()
        experiment = self.client.get_experiment_by_name(experiment_name)

        if experiment is None:
            self.experiment_id = self.client.create_experiment(experiment_name)
        else:
            self.experiment_id = experiment.experiment_id

        mlflow.set_experiment(experiment_name)
        self._active_run = None

    def start_run(self, run_name: Optional[str] = None, tags: Optional[Dict] = None) -> str:
        """Start a new MLflow run.

        Returns:
            Run ID.
        """
        self._active_run = mlflow.start_run(run_name=run_name, tags=tags)
        return self._active_run.info.run_id

    def end_run(self, status: str = "FINISHED"):
        """End the current MLflow run."""
        if self._active_run:
            mlflow.end_run(status=status)
            self._active_run = None

    def log_params(self, params: Dict):
        mlflow.log_params(params)

    def log_manifest(self, manifest_dump: Dict[str, Any]):
        """Log every manifest field as a dotted parameter."""
        self.log_params(flatten_params(manifest_dump))

    def log_round(self, record: "RoundRecord"):
        """Log one round's curves, using the round index as the step."""
        mlflow.log_metrics(
            {
                "val_acc": record.val_acc,
                "test_acc": record.test_acc,
                "grad_norm_mean": record.grad_norm_mean,
                "train_loss": record.train_loss,
            },
            step=record.round,
        )

    def log_report(self, report: MetricReport):
        """Log the final metrics; non-finite values are skipped."""
        metrics = {
            key: float(value)
            for key, value in report.to_dict().items()
            if isinstance(value, (int, float)) and math.isfinite(value)
        }
        mlflow.log_metrics(metrics)

    def log_run_directory(self, run_dir: Path):
        """Upload the whole run directory."""
        mlflow.log_artifacts(str(run_dir), "run")

    @property
    def run_id(self) -> Optional[str]:
        """Get current run ID."""
        return self._active_run.info.run_id if self._active_run else None
