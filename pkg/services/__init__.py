# This file makes the 'services' directory a Python package
# and centralizes the shared service instances.

from .model_service import ModelService
from .conditions_service import ConditionService
from .coupling_service import CouplingService
from .estimate_service import EstimateService
from .operator_service import OperatorService

# Single shared instances that the commands import
model_service = ModelService()
condition_service = ConditionService(model_service)
coupling_service = CouplingService(model_service, condition_service)
estimate_service = EstimateService(model_service, coupling_service)
operator_service = OperatorService()
