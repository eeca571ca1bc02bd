"""
IMDN Engine - Super-resolución ligera
Red de destilación de información en numpy, con autograd propio, recorte adaptativo y métricas
"""

__version__ = "1.0.0"
