"""Deterministic NTP/DNS attack testbed.

A discrete-event simulator of the NTP/DNS ecosystem plus the analytic layer
for off-path time-shifting attacks: defragmentation-cache DNS poisoning,
NTP rate-limit abuse, and pool poisoning against union-of-lookups clients.
"""

__version__ = "0.1.0"
