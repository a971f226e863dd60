"""
Models package - the run ledger stored by the application database
"""

from lanechange.models.run import PipelineRun

__all__ = ['PipelineRun']
