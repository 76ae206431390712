# Stochastic supply chain network design
