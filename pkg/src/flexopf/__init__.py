"""AC optimal power flow with flexible line impedances via transformer-pair SDP relaxation."""

__version__ = "0.1.0"
