"""Piano transcription with sparse attention, in numpy."""

from .estimator import SparseTranscriber
from .exceptions import ContractViolation, InputError

__all__ = ["SparseTranscriber", "InputError", "ContractViolation"]
__version__ = "0.1.0"
