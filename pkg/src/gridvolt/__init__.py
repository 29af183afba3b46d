"""gridvolt: quasi-static LV feeder simulation with PV inverter control.

Modules: netmodel (topology and cables), pfsolve (power-flow oracle),
linmodel (voltage sensitivities), controllers (droop and legacy inverters),
cicopt (coordinated dispatch), simeng (day loop, scenarios, metrics),
cli (batch entry point).
"""

from . import cicopt, cli, controllers, linmodel, netmodel, pfsolve, simeng

__version__ = "0.1.0"

__all__ = [
    "cicopt",
    "cli",
    "controllers",
    "linmodel",
    "netmodel",
    "pfsolve",
    "simeng",
    "__version__",
]
