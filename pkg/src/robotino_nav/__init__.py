"""Simulation and navigation stack for a three-omniwheel Robotino."""
