# Reference parameter sets and report text for the pricer
