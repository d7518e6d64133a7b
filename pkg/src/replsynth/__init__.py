"""
replsynth - execution-guided program synthesis.

A learned policy writes code one grammar action at a time, a REPL executes
every partial program, and a learned value assesses the executed state.
Search (SMC, beam, rollouts, A*) combines the three.
"""

__version__ = "0.1.0"
__author__ = "Your Name"
__license__ = "MIT"

from replsynth.config import Config
from replsynth.mdp import Action, Domain, SynthState

__all__ = ["Action", "Config", "Domain", "SynthState", "__version__"]
