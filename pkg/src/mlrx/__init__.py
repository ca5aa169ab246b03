"""Link-level MU-MIMO OFDM uplink receivers: conventional grouped-LMMSE and a
CNN-enhanced variant trained end to end on bit-level cross-entropy."""

__version__ = "0.1.0"
