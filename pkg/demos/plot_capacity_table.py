"""
Cache size versus capacity
==========================

Bytes cached per token, parameter count and rank statistics for the
published configurations.

"""

from gmha.capacity import capacity_report
from gmha.config import PRESET_GROUPS, PRESETS

# one row per preset; elem_bytes=2 means 16-bit cache entries
print(f"{'preset':12s} {'kv B/tok':>9s} {'heads':>6s} {'FRH':>5s} {'SLSD':>5s} {'TER':>6s}")
for name in PRESET_GROUPS["7b"] + PRESET_GROUPS["1b"]:
    r = capacity_report(*PRESETS[name], elem_bytes=2)
    print(f"{name:12s} {r.kv_bytes_per_token:9d} {r.heads:6d} {r.frh:5d} {r.slsd:5d} {r.ter:6d}")

# MFA caches an eighth of what MHA does yet has more total rank
mfa = capacity_report(*PRESETS["7b-mfa"])
mha = capacity_report(*PRESETS["7b-mha"])
print("cache ratio", mfa.kv_bytes_per_token / mha.kv_bytes_per_token)
print("rank ratio ", mfa.ter / mha.ter)
