"""fleetgrid: joint dispatch of an electric ride-hailing fleet and a DC power grid.

The package couples a time- and charge-expanded vehicle routing LP with a
DC optimal power flow LP, solves them jointly or through an iterative
price negotiation between independent fleet and grid agents, and closes the
loop with a receding-horizon simulator that replans as demand reveals itself.
"""

__version__ = "0.1.0"

from .lpcore import (  # noqa: F401
    LpBuilder,
    LpProblem,
    LpSolution,
    LpStatus,
    SolveOptions,
    solve,
)
