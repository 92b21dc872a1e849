"""Error categories; the CLI maps each one to an exit code."""


class VrpError(Exception):
    category = "error"
    exit_code = 1


class UsageError(VrpError, ValueError):
    category = "usage"
    exit_code = 2


class ContractError(VrpError, ValueError):
    """An operation was called outside its precondition (e.g. infeasible action)."""
    category = "contract"
    exit_code = 2


class DataError(VrpError):
    category = "data"
    exit_code = 3


class SchemaError(DataError):
    category = "schema"


class StorageError(VrpError, OSError):
    category = "io"
    exit_code = 4
