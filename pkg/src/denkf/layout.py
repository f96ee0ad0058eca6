"""Index layout of the state and raw-observation vectors."""

STATE_DIM = 14
RAW_DIM = 22

# state x = [q_l (6D), q_u (6D), r_h (sin, cos)]
Q_LOWER = slice(0, 6)
Q_UPPER = slice(6, 12)
R_HIP = slice(12, 14)

# raw observation y = [dt, theta_sw (6D), v, alpha, gamma, phi, rho, r_h]
DT = 0
THETA_SW = slice(1, 7)
VEL = slice(7, 10)
LIN_ACC = slice(10, 13)
GRAVITY = slice(13, 16)
GYRO = slice(16, 19)
PRESSURE = 19
RAW_R_HIP = slice(20, 22)

STATE_NAMES = (
    [f"ql_{i}" for i in range(6)] + [f"qu_{i}" for i in range(6)] + ["rh_sin", "rh_cos"]
)
RAW_NAMES = (
    ["dt"] + [f"theta_{i}" for i in range(6)]
    + ["v_x", "v_y", "v_z", "alpha_x", "alpha_y", "alpha_z",
       "gamma_x", "gamma_y", "gamma_z", "phi_x", "phi_y", "phi_z",
       "rho", "obs_rh_sin", "obs_rh_cos"]
)
