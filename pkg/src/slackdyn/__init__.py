"""Phasor-domain power-system dynamics with slack-bus capability analysis."""

from .caseio import load as load_case, parse_case
from .dynsim import DynamicSystem, Event, Perturbation, ScaleLoad, Scenario, SetParam, Trajectory, run
from .netcore import Branch, Bus, Network, build_admittance
from .powerflow import Generator, Injections, SlackSpec, solve_powerflow
from .slackcheck import Verdict, audit_power_split, check, check_strong, check_weak, classify

__version__ = "0.1.0"

__all__ = [
    "Branch",
    "Bus",
    "DynamicSystem",
    "Event",
    "Generator",
    "Injections",
    "Network",
    "Perturbation",
    "ScaleLoad",
    "Scenario",
    "SetParam",
    "SlackSpec",
    "Trajectory",
    "Verdict",
    "audit_power_split",
    "build_admittance",
    "check",
    "check_strong",
    "check_weak",
    "classify",
    "load_case",
    "parse_case",
    "run",
    "solve_powerflow",
]
