"""Exception types shared across the simulator."""


class ConfigError(ValueError):
    """Invalid configuration; ``problems`` lists every offending key."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class ShapeError(ValueError):
    pass


class NumericError(ValueError):
    pass


class TrainingError(RuntimeError):
    """Runtime failure inside the round loop, tagged with where it happened."""

    def __init__(self, message, round=None, client=None):
        self.round = round
        self.client = client
        where = []
        if round is not None:
            where.append(f"round {round}")
        if client is not None:
            where.append(f"client {client}")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)
