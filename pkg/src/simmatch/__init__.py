"""On/off-road map matching with a semi-interacting multiple model filter."""
