# ConfProbe - Black-box Confidence Estimation
__version__ = "0.1.0"
