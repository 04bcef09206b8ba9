"""Orchestration fabric for federations of capability-advertising agents."""
from .capability import SpecDocument, Vcv, bump_version, embed_text, reduce_dim
from .config import FederationConfig
from .errors import FoaError
from .orchestrator import JobReport, Orchestrator
from .scenario import Scenario, load_scenario, run_scenario

__all__ = ["FederationConfig", "FoaError", "JobReport", "Orchestrator", "Scenario", "SpecDocument", "Vcv",
           "bump_version", "embed_text", "load_scenario", "reduce_dim", "run_scenario"]
__version__ = "0.1.0"
