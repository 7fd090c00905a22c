#pragma once

#include <univpm/clustering.hpp>
#include <univpm/common.hpp>
#include <univpm/config_file.hpp>
#include <univpm/corpus.hpp>
#include <univpm/evaluation.hpp>
#include <univpm/io.hpp>
#include <univpm/mi.hpp>
#include <univpm/neural.hpp>
#include <univpm/trainer.hpp>
#include <univpm/transfer.hpp>
