"""Design pipeline for stripe-patterned hydrogel helical microswimmers."""
__version__ = "0.1.0"
