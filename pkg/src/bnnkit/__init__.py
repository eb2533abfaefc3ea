"""Binary neural network toolkit: parameter fusion, bit-exact packed execution
and systolic-array cycle/area estimation."""

__version__ = "0.1.0"
