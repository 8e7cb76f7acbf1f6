from sqlalchemy import Boolean, Column, Float, Integer, String
from sqlalchemy.orm import declarative_base
Base = declarative_base()

METRICS_FIELDS = ['model', 'noise_kind', 'level', 'miou', 'accuracy', 're']
GRADCHECK_FIELDS = ['check', 'instances', 'max_relative_error', 'max_absolute_error', 'probes', 'non_finite', 'tolerance', 'passed']
TRAIN_LOG_FIELDS = ['iteration', 'loss', 'lambda']

class Metrics(Base):
    __tablename__ = 'metrics'
    id = Column(Integer, primary_key=True)
    model = Column(String)
    noise_kind = Column(String)
    level = Column(Float)
    miou = Column(Float)
    accuracy = Column(Float)
    re = Column(Float)

class GradCheck(Base):
    __tablename__ = 'gradcheck'
    id = Column(Integer, primary_key=True)
    check = Column(String)
    instances = Column(Integer)
    max_relative_error = Column(Float)
    max_absolute_error = Column(Float)
    probes = Column(Integer)
    non_finite = Column(Integer)
    tolerance = Column(Float)
    passed = Column(Boolean)
