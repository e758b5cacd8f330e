"""Training checkpoints: parameters, optimizer state, counters and RNG state."""

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import torch

from src.config import TrainConfig
from src.errors import CheckpointError
from src.model import PhotoToSketchModel


@dataclass
class Checkpoint:
    """Everything needed to resume training or rebuild the model.

    Attributes:
        model_state: ``state_dict`` of the whole model
        optimizer_state: ``state_dict`` of the optimizer (None for exports)
        epoch: Completed epochs
        step: Completed optimizer steps
        fingerprint: Model-structure fingerprint of the config
        config: ``TrainConfig.to_dict()``
        scale_factor: Offset scale the sketches were normalized with
        rng_state: Torch CPU generator state at save time
    """
    model_state: Dict[str, torch.Tensor]
    optimizer_state: Optional[Dict[str, Any]]
    epoch: int
    step: int
    fingerprint: str
    config: Dict[str, Any]
    scale_factor: float = 1.0
    rng_state: Optional[torch.Tensor] = None
    extra: Dict[str, Any] = field(default_factory=dict)

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.config)


def save_checkpoint(
    path: Union[str, Path],
    model: PhotoToSketchModel,
    optimizer: Optional[torch.optim.Optimizer],
    epoch: int,
    step: int,
    config: TrainConfig,
    scale_factor: float,
) -> str:
    output_path = Path(path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "epoch": epoch,
        "step": step,
        "fingerprint": config.fingerprint(),
        "config": config.to_dict(),
        "scale_factor": float(scale_factor),
        "rng_state": torch.get_rng_state(),
    }
    torch.save(payload, output_path)
    return str(output_path)


def load_checkpoint(path: Union[str, Path], config: Optional[TrainConfig] = None) -> Checkpoint:
    """Read a checkpoint, checking its fingerprint against ``config`` when given.

    Raises:
        CheckpointError: missing or unreadable file, or a fingerprint mismatch
    """
    input_path = Path(path)
    if not input_path.exists():
        raise CheckpointError("Checkpoint not found", {"file_path": str(input_path)})
    try:
        payload = torch.load(input_path, map_location="cpu", weights_only=False)
        checkpoint = Checkpoint(**payload)
    except Exception as e:
        raise CheckpointError("Unreadable checkpoint", {"file_path": str(input_path), "cause": str(e)})
    if config is not None and checkpoint.fingerprint != config.fingerprint():
        raise CheckpointError(
            "Checkpoint was trained with a different model structure",
            {"file_path": str(input_path), "expected": config.fingerprint()[:12], "found": checkpoint.fingerprint[:12]},
        )
    return checkpoint


def restore_model(
    source: Union[str, Path, Checkpoint], config: Optional[TrainConfig] = None
) -> Tuple[PhotoToSketchModel, TrainConfig, Checkpoint]:
    """Rebuild the model stored in a checkpoint, in eval mode.

    ``config`` overrides the stored settings that do not change the
    parameter layout (sampling temperature, T_max, ...).
    """
    checkpoint = source if isinstance(source, Checkpoint) else load_checkpoint(source, config)
    stored = checkpoint.train_config()
    config = config or stored
    if config.fingerprint() != checkpoint.fingerprint:
        raise CheckpointError("Configuration does not match the checkpoint's model structure")
    model = PhotoToSketchModel(replace(config, pretrained_weights=None))
    try:
        model.load_state_dict(checkpoint.model_state, strict=True)
    except RuntimeError as e:
        raise CheckpointError("Checkpoint parameters do not fit the model", {"cause": str(e)})
    model.eval()
    return model, config, checkpoint
