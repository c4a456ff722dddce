from phylokern.bioio.dataset import CopheneticMatrix, Dataset, align_dataset, cophenetic
from phylokern.bioio.fasta import SequenceRecord, format_fasta, parse_fasta
from phylokern.bioio.newick import PhyloTree, parse_newick
from phylokern.bioio.otutable import OtuTable, parse_otu_table

__all__ = [
    "CopheneticMatrix",
    "Dataset",
    "OtuTable",
    "PhyloTree",
    "SequenceRecord",
    "align_dataset",
    "cophenetic",
    "format_fasta",
    "parse_fasta",
    "parse_newick",
    "parse_otu_table",
]
