from .library import LIBRARY, ScenarioLibraryEntry, get_entry
from .runner import run_library_entry, run_scenario, sweep

__all__ = [
    "LIBRARY",
    "ScenarioLibraryEntry",
    "get_entry",
    "run_library_entry",
    "run_scenario",
    "sweep",
]
