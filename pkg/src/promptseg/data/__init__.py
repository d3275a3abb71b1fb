from .io import DatasetError, DatasetManifest, LazyRecords, load_records, read_dataset, write_dataset
from .sampler import balanced_sampler, frame_weights
from .synth import SPLIT_OFFSETS, ClassTemplate, SynthConfig, gen_scene, gen_split, synthetic_lexicon
