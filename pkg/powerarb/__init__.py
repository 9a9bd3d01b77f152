"""Power Arbitrage Lab - day-ahead / balancing market arbitrage with dual DDPG agents."""

__version__ = "1.0.0"
