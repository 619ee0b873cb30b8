"""Clustered-sparse complex recovery via EM-EP, with a massive-MIMO channel front end.

Layout:
    signal_model  -- channels, pilots, steering dictionaries, measurements, NMSE
    ep            -- inner expectation-propagation loop (Gaussian x Bernoulli sites,
                     Markov forward/reverse support messages)
    em            -- outer EM loop learning (tau, gamma, eta, theta) + grid refinement
    oracles       -- brute-force references (quadrature, enumeration, exhaustive posterior)
    experiment    -- config parsing, Monte Carlo runner, CSV output
    cli           -- command-line entry point
"""

__version__ = "0.1.0"
