"""Permissioned ledger whose consensus runs as serverless functions, with a deterministic simulator."""
from .costmodel import calibrate_serverless, per_tx_cost_serverless
from .integrity import audit_state_at, chain_verify, export_ledger, verify_agreement
from .network import make_chain_config, provision_network
from .schema import compile_schema
from .simulation import Scenario, load_scenario, run_scenario

__all__ = [
    "Scenario",
    "audit_state_at",
    "calibrate_serverless",
    "chain_verify",
    "compile_schema",
    "export_ledger",
    "load_scenario",
    "make_chain_config",
    "per_tx_cost_serverless",
    "provision_network",
    "run_scenario",
    "verify_agreement",
]
