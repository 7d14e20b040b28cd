"""haarmc: multilevel quasi-Monte Carlo for elliptic PDEs with Matern
random coefficients, built on hybrid Haar-wavelet white-noise sampling."""

__version__ = "0.1.0"
