"""Single-atom cavity photon-router toolkit.

A fiber-coupled whispering-gallery resonator with one three-level atom acts
as a passive switch: photons arriving from one side are reflected and toggle
the atom, photons arriving while the atom sits in the other ground sublevel
are transmitted.  The package provides

* closed-form steady-state formulas (``analytic``),
* a Monte Carlo wavefunction trajectory engine (``dynamics``),
* an end-to-end emulator producing time-tagged detector clicks
  (``experiment``),
* the data reduction recovering switching statistics from click streams
  (``analysis``),
* and a command line front end (``cli``).
"""

from photonswitch.model import (
    AtomLevel,
    GDistribution,
    SwitchState,
    SystemParams,
    cooperativity,
    critical_coupling_kex,
    parasitic_couplings,
)

__all__ = [
    "AtomLevel",
    "GDistribution",
    "SwitchState",
    "SystemParams",
    "cooperativity",
    "critical_coupling_kex",
    "parasitic_couplings",
]

__version__ = "0.1.0"
