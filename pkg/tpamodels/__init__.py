from tpamodels import utils
from tpamodels import models
