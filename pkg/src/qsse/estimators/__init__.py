"""State estimators sharing the :class:`~qsse.estimators.base.EstimatorRun` output."""

from .base import EstimatorRun, eval_steps
from .ekf import EkfConfig, ekf_run
from .esn import EsnConfig, EsnSetup, esn_run
from .pf import PfConfig, pf_run
from .wls import WlsConfig, wls_run

__all__ = ["EstimatorRun", "eval_steps", "EkfConfig", "ekf_run", "EsnConfig", "EsnSetup", "esn_run",
           "PfConfig", "pf_run", "WlsConfig", "wls_run"]
