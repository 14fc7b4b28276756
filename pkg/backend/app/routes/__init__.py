from .experiments import experiments_blueprint
