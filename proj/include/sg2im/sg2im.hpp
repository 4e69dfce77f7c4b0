#pragma once

#include "sg2im/ablation.hpp"
#include "sg2im/checkpoint.hpp"
#include "sg2im/conditioning.hpp"
#include "sg2im/config.hpp"
#include "sg2im/dataset.hpp"
#include "sg2im/denoiser.hpp"
#include "sg2im/diffusion.hpp"
#include "sg2im/finetune.hpp"
#include "sg2im/gca.hpp"
#include "sg2im/graph_encoder.hpp"
#include "sg2im/http_provider.hpp"
#include "sg2im/metrics.hpp"
#include "sg2im/objectives.hpp"
#include "sg2im/pipeline.hpp"
#include "sg2im/scenegraph.hpp"
#include "sg2im/toy_corpus.hpp"
