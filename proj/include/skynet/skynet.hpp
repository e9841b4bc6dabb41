#pragma once

#include "skynet/tensor.hpp"
#include "skynet/ops.hpp"
#include "skynet/grad.hpp"
#include "skynet/arch.hpp"
#include "skynet/costmodel.hpp"
#include "skynet/detect.hpp"
#include "skynet/train.hpp"
#include "skynet/dataset.hpp"
#include "skynet/search.hpp"
#include "skynet/quant.hpp"
#include "skynet/gradcheck.hpp"
#include "skynet/io.hpp"
