"""Random access for LEO satellite links with learned preamble-collision estimation."""

from .prach_signal import PrachConfig, Preamble, UserTx, correlate_windows, superpose_receive, zc_root
from .ntn_channel import LOS_PROFILE, NLOS_PROFILE, TdlProfile, get_profile
from .step3_policy import build_policy, optimal_access_prob, posterior
from .rach_engine import SimConfig, run_scenario, sweep

__version__ = "0.1.0"
