"""Label- and distance-band-conditional prediction sets from KNN model approximations."""

__version__ = "0.1.0"
