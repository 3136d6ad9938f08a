import logging
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import torch
from torch import nn

from app.backend.errors import CheckpointError
from app.backend.models.registry import head_parameter_names, reset_module_parameters
from app.backend.schemas import LoadReport
from app.backend.storage import store

logger = logging.getLogger(__name__)


def load_partial_checkpoint(
    model: nn.Module,
    checkpoint: Union[Path, str, Dict[str, Any]],
    reinit_heads: bool = False,
) -> Tuple[nn.Module, LoadReport]:
    """Load every parameter whose name and shape match; reinitialize the rest.

    The checkpoint is fully parsed and checked before the model is touched.
    """
    payload = checkpoint if isinstance(checkpoint, dict) else store.load_checkpoint(Path(checkpoint))
    parameters = payload.get("parameters")
    if not isinstance(parameters, dict):
        raise CheckpointError("checkpoint has no parameter map")

    own = model.state_dict()
    heads = set(head_parameter_names(model)) if reinit_heads else set()
    loaded, reinitialized = [], []
    for name, tensor in own.items():
        source = parameters.get(name)
        if name not in heads and source is not None and tuple(source.shape) == tuple(tensor.shape):
            loaded.append(name)
        else:
            reinitialized.append(name)
    skipped = sorted(set(parameters) - set(loaded))
    if not loaded:
        raise CheckpointError("no parameter of the checkpoint matches the model by name and shape")

    # resetting a module resets all its tensors, so loaded ones are copied afterwards
    reset_module_parameters(model, reinitialized)
    with torch.no_grad():
        for name in loaded:
            own[name].copy_(parameters[name].to(own[name].dtype))
    report = LoadReport(loaded=loaded, reinitialized=reinitialized, skipped=skipped)
    logger.info(
        "Checkpoint: %d loaded, %d reinitialized, %d skipped",
        len(report.loaded),
        len(report.reinitialized),
        len(report.skipped),
    )
    return model, report
