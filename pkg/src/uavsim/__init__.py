"""Desk-scale simulator and experiment harness for UAV-assisted communication.

Two coupled decision problems are solved per run: where the serving UAV
should hover and how to split transmit power across ground users (a dueling
double Q-learning agent), and how to fly to that coordinate without hitting
intruder aircraft (depth-limited Monte Carlo tree search).  Every decision
either agent takes can be recorded as a machine-readable trace and queried
afterwards.
"""

__version__ = "0.1.0"
