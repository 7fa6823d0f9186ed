"""Zero dynamics policies for a hybrid 3D hopper.

Pipeline: simulate the hybrid hopper (``hopper``), solve box-constrained
discrete-time optimal control (``trajopt``), learn a lean-command policy whose
zeroing manifold is invariant under the optimal controller (``policy``,
``training``), and certify the closed loop empirically (``evaluation``).
"""

__version__ = "0.1.0"
