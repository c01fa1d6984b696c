from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

from app.models.run_config import RunConfig

CHECKPOINT_FORMAT = 'savqa-checkpoint'
SNS_FORMAT = 'savqa-sns'
CHECKPOINT_VERSION = 1


@dataclass
class SNSState:
    """
    Frozen SuperNode-selection model: constructor header plus parameters
    """
    header: Dict[str, Any]
    parameters: Dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class Checkpoint:
    """
    Trained model: the run configuration and variant, the answer vocabulary
    and every named parameter tensor
    """
    config: RunConfig
    variant: str
    answers: List[str]
    parameters: Dict[str, np.ndarray] = field(default_factory=dict)
    sns: Optional[SNSState] = None
    effective_labels: bool = False

    def answer_index(self, answer: str) -> Optional[int]:
        try:
            return self.answers.index(answer)
        except ValueError:
            return None
