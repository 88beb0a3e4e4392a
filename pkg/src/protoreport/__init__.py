"""protoreport: prototype-bank knowledge retrieval for structured reporting.

The library converts a free-text report corpus into a template-aligned
prototype knowledge bank and uses masked cosine retrieval plus a learned
residual logit correction to populate hierarchical structured reports from
image features.

Typical flow:

    world    = synth.generate(synth.SynthConfig(seed=0))
    results  = extraction.mine_corpus(world.studies, world.template,
                                      world.lexicon, rule_extractor)
    pools    = extraction.build_example_pools(results)
    protobank = bank.build_bank(pools, embedder, sample_size=5, seed=0,
                                template=world.template)
    trained  = training.run_training(world.template, world.gold,
                                     world.image_features, protobank,
                                     dims, training.TrainConfig())
    report   = evaluate.populate_report(image, world.template,
                                        trained.model, trained.bank)
"""

from . import backbone, bank, errors, evaluate, extraction, fusion, synth, template, terminology, training
from .backbone import ImageInput, ModelDims, QuestionContext
from .bank import PrototypeBank, Prototype, EmaEncoderState, aggregate_maxpool, build_bank, ema_update, kb_coverage, refresh_bank
from .evaluate import EvalMetrics, compute_metrics, macro_f1, populate_report, report_accuracy
from .extraction import (
    ConstrainedQuery,
    ExtractionResult,
    FreeTextStudy,
    RuleBasedExtractor,
    build_example_pools,
    extract_study,
    filter_extractions,
)
from .fusion import FusionHeadParams, Model, RetrievalWeights, forward, fuse, retrieve, summarize, support_bias, valid_mask
from .synth import SynthConfig, SynthWorld, generate
from .template import (
    AnswerOption,
    Question,
    StructuredReport,
    Template,
    check_consistency,
    load_template,
    serialize_template,
    traversal_order,
)
from .terminology import TerminologyLexicon, expand_terminology, normalize_phrase
from .training import TrainConfig, run_training, train_step

__version__ = "0.1.0"
